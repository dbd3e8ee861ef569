"""Neverallow assertion checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Optional

from .model import AllowRule, NeverallowRule, Policy, resolve_type_set


@dataclass(frozen=True)
class NeverallowViolation:
    neverallow: NeverallowRule
    allow: AllowRule
    witness_source: str
    witness_target: str
    witness_class: str
    witness_perms: frozenset

    def as_dict(self) -> dict:
        return {
            "neverallow": str(self.neverallow),
            "neverallow_origin": str(self.neverallow.origin),
            "allow": str(self.allow),
            "allow_origin": str(self.allow.origin),
            "witness": {
                "source": self.witness_source,
                "target": self.witness_target,
                "class": self.witness_class,
                "perms": sorted(self.witness_perms),
            },
        }


def _witnesses(policy: Policy, never: NeverallowRule, allow: AllowRule, strict: bool):
    """Yield (source, target) pairs granted by ``allow`` and forbidden by ``never``."""
    sources = resolve_type_set(policy, never.source, strict=strict) & \
        resolve_type_set(policy, allow.source, strict=strict)
    if not sources:
        return
    self_involved = never.target.kind == "self" or allow.target.kind == "self"
    if not self_involved:
        targets = resolve_type_set(policy, never.target, strict=strict) & \
            resolve_type_set(policy, allow.target, strict=strict)
        for s in sorted(sources):
            for t in sorted(targets):
                yield s, t
        return
    for s in sorted(sources):
        n_targets = resolve_type_set(policy, never.target, s, strict)
        a_targets = resolve_type_set(policy, allow.target, s, strict)
        for t in sorted(n_targets & a_targets):
            yield s, t


def check_neverallows(
    policy: Policy,
    extra_neverallows: Optional[Iterable[NeverallowRule]] = None,
    all_witnesses: bool = False,
    strict: bool = False,
) -> List[NeverallowViolation]:
    """Report allow rules that grant access a neverallow forbids.

    One violation per (neverallow, allow) pair carrying the smallest witness
    in (source, target) order; ``all_witnesses`` reports every concrete pair.
    Results follow neverallow order, then allow order.
    """
    neverallows = list(policy.neverallows) + list(extra_neverallows or ())
    violations = []
    for never in neverallows:
        never_perms = policy.expand_perms(never.av)
        for allow in policy.allows_by_class(never.av.cls):
            perms = never_perms & policy.expand_perms(allow.av)
            if not perms:
                continue
            for s, t in _witnesses(policy, never, allow, strict):
                violations.append(NeverallowViolation(never, allow, s, t, never.av.cls, perms))
                if not all_witnesses:
                    break
    return violations
