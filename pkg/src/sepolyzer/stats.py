"""Policy complexity metrics, baseline diffs and attribute-graph export."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .model import (
    DEFAULT_DOMAIN_ATTRIBUTE,
    GenfsContext,
    Policy,
    PolicyError,
    TypeSetExpr,
    TypeTransitionRule,
    resolve_type_set,
)

UNTRUSTED_APP = "untrusted_app"


class FilterUnknownType(PolicyError):
    def __init__(self, name: str):
        super().__init__(f"filter type {name!r} is not declared in either policy")
        self.name = name


@dataclass(frozen=True)
class PolicyStats:
    type_count: int = 0
    domain_count: int = 0
    type_transition_count: int = 0
    process_transition_count: int = 0
    allow_rule_count: int = 0
    attribute_count: int = 0
    genfs_context_count: int = 0
    untrusted_app_rule_count: int = 0
    class_count: int = 0
    permission_count: int = 0
    initial_sid_count: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StatsDelta(PolicyStats):
    """Fieldwise subject minus baseline; fields may be negative."""


@dataclass(frozen=True)
class ComplexityRatios:
    allow_per_type: Optional[float]
    types_per_domain: Optional[float]
    process_trans_per_domain: Optional[float]

    def as_dict(self) -> dict:
        return asdict(self)


def compute_stats(policy: Policy, domain_attribute: str = DEFAULT_DOMAIN_ATTRIBUTE) -> PolicyStats:
    untrusted = 0
    for rule in policy.allows:
        if UNTRUSTED_APP in resolve_type_set(policy, rule.source):
            untrusted += 1
    perm_names = set()
    for perms in policy.permissions.values():
        perm_names |= perms
    return PolicyStats(
        type_count=len(policy.types),
        domain_count=len(policy.members_of(domain_attribute)),
        type_transition_count=len(policy.transitions),
        process_transition_count=sum(1 for t in policy.transitions if t.is_process),
        allow_rule_count=len(policy.allows),
        attribute_count=len(policy.attributes),
        genfs_context_count=len(policy.genfs),
        untrusted_app_rule_count=untrusted,
        class_count=len(policy.classes),
        permission_count=len(perm_names),
        initial_sid_count=len(policy.sids),
    )


def expanded_allow_count(policy: Policy) -> int:
    """Distinct (source, target, class) triples after attribute expansion."""
    triples = set()
    for rule in policy.allows:
        sources = resolve_type_set(policy, rule.source)
        if rule.target.kind == "self":
            triples.update((s, s, rule.av.cls) for s in sources)
        else:
            targets = resolve_type_set(policy, rule.target)
            triples.update((s, t, rule.av.cls) for s in sources for t in targets)
    return len(triples)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den > 0 else None


def complexity_ratios(stats: PolicyStats) -> ComplexityRatios:
    return ComplexityRatios(
        allow_per_type=_ratio(stats.allow_rule_count, stats.type_count),
        types_per_domain=_ratio(stats.type_count, stats.domain_count),
        process_trans_per_domain=_ratio(stats.process_transition_count, stats.domain_count),
    )


def stats_delta(baseline: PolicyStats, subject: PolicyStats) -> StatsDelta:
    return StatsDelta(**{
        f.name: getattr(subject, f.name) - getattr(baseline, f.name) for f in fields(PolicyStats)
    })


@dataclass
class PolicyDiff:
    added_types: set = field(default_factory=set)
    removed_types: set = field(default_factory=set)
    added_attributes: set = field(default_factory=set)
    removed_attributes: set = field(default_factory=set)
    added_allows: list = field(default_factory=list)
    removed_allows: list = field(default_factory=list)
    added_neverallows: list = field(default_factory=list)
    removed_neverallows: list = field(default_factory=list)
    added_transitions: list = field(default_factory=list)
    removed_transitions: list = field(default_factory=list)
    added_genfs: list = field(default_factory=list)
    removed_genfs: list = field(default_factory=list)

    CATEGORIES = ("types", "attributes", "allows", "neverallows", "transitions", "genfs")

    def is_empty(self) -> bool:
        return not any(getattr(self, f.name) for f in fields(self))

    def swapped(self) -> "PolicyDiff":
        kw = {}
        for cat in self.CATEGORIES:
            kw["added_" + cat] = getattr(self, "removed_" + cat)
            kw["removed_" + cat] = getattr(self, "added_" + cat)
        return PolicyDiff(**kw)

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, set):
                out[f.name] = sorted(value)
            else:
                out[f.name] = [{"rule": str(r), "origin": str(r.origin)} for r in value]
        return out


def _rule_diff(base_rules, subj_rules):
    base_keys = {r.key() for r in base_rules}
    subj_keys = {r.key() for r in subj_rules}

    def unique(rules, exclude):
        seen, out = set(), []
        for r in rules:
            k = r.key()
            if k not in exclude and k not in seen:
                seen.add(k)
                out.append(r)
        return out

    return unique(subj_rules, base_keys), unique(base_rules, subj_keys)


def _mentions(policy: Policy, item, type_name: str) -> bool:
    if isinstance(item, TypeTransitionRule):
        return any(type_name in resolve_type_set(policy, TypeSetExpr.single(n))
                   for n in (item.subject, item.object_type, item.result))
    if isinstance(item, GenfsContext):
        return item.label.type == type_name
    sources = resolve_type_set(policy, item.source)
    if type_name in sources:
        return True
    if item.target.kind == "self":
        return False
    return type_name in resolve_type_set(policy, item.target)


def diff_policies(baseline: Policy, subject: Policy, type_filter: Optional[str] = None) -> PolicyDiff:
    """Structural diff of ``subject`` against ``baseline``.

    Rules compare by normalized structure, so permission and set-member order
    do not matter and duplicate statements count once.  With ``type_filter``
    only entries whose resolved source or target contains that type are kept.
    """
    if type_filter is not None and type_filter not in baseline.types and type_filter not in subject.types:
        raise FilterUnknownType(type_filter)

    diff = PolicyDiff(
        added_types=set(subject.types) - set(baseline.types),
        removed_types=set(baseline.types) - set(subject.types),
        added_attributes=set(subject.attributes) - set(baseline.attributes),
        removed_attributes=set(baseline.attributes) - set(subject.attributes),
    )
    for cat in ("allows", "neverallows", "transitions", "genfs"):
        added, removed = _rule_diff(getattr(baseline, cat), getattr(subject, cat))
        setattr(diff, "added_" + cat, added)
        setattr(diff, "removed_" + cat, removed)

    if type_filter is None:
        return diff

    diff.added_types &= {type_filter}
    diff.removed_types &= {type_filter}
    diff.added_attributes = {a for a in diff.added_attributes
                             if type_filter in subject.members_of(a)}
    diff.removed_attributes = {a for a in diff.removed_attributes
                               if type_filter in baseline.members_of(a)}
    for cat in ("allows", "neverallows", "transitions", "genfs"):
        setattr(diff, "added_" + cat, [r for r in getattr(diff, "added_" + cat)
                                       if _mentions(subject, r, type_filter)])
        setattr(diff, "removed_" + cat, [r for r in getattr(diff, "removed_" + cat)
                                         if _mentions(baseline, r, type_filter)])
    return diff


def _dot_id(name: str) -> str:
    return '"' + name.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_attribute_graph(policy: Policy) -> str:
    """DOT digraph with an edge from each type to every attribute it belongs to."""
    lines = ["digraph attributes {"]
    nodes = [(name, "ellipse") for name in policy.types]
    nodes += [(name, "box") for name in policy.attributes]
    for name, shape in sorted(nodes):
        lines.append(f"  {_dot_id(name)} [shape={shape}];")
    for t in sorted(policy.types):
        for a in sorted(policy.types[t].attributes):
            lines.append(f"  {_dot_id(t)} -> {_dot_id(a)};")
    lines.append("}")
    return "\n".join(lines) + "\n"
