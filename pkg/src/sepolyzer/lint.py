"""Heuristic detectors for common OEM policy misconfigurations.

L1  rules targeting default types
L2  predefined app domains that accumulated far more rules than the baseline
L3  ``execute`` grants that can never run (no transition, no execute_no_trans)
L4  additions to untrusted domains
L5  access to security-sensitive types
L6  read/write on file-like classes without ``open``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Set

from .device import refine_findings
from .model import (
    AllowRule,
    Origin,
    Policy,
    TypeSetExpr,
    expand_rule_pairs,
    resolve_targets,
    resolve_type_set,
)

SEVERITIES = ("error", "warning", "info")
_SEVERITY_RANK = {s: i for i, s in enumerate(SEVERITIES)}

FILE_LIKE_CLASSES = frozenset({"file", "chr_file", "blk_file", "fifo_file", "sock_file", "lnk_file"})
OPEN_EXEMPT_CLASSES = frozenset({"lnk_file"})

BASELINE_AWARE = frozenset({"L1", "L2", "L4", "L5"})


class LintConfigError(ValueError):
    pass


def severity_at_least(severity: str, threshold: str) -> bool:
    return _SEVERITY_RANK[severity] <= _SEVERITY_RANK[threshold]


@dataclass(frozen=True)
class LintConfig:
    default_types: frozenset = frozenset(
        {"unlabeled", "socket_device", "device", "default_prop", "system_data_file"})
    sensitive_types: frozenset = frozenset(
        {"proc_security", "kmem_device", "security_file", "tee", "keystore"})
    untrusted_domains: frozenset = frozenset({"untrusted_app"})
    crowded_domains: frozenset = frozenset({"system_app", "platform_app"})
    crowded_ratio_threshold: float = 2.0
    missing_open_severity: str = "info"

    def __post_init__(self):
        for name in ("default_types", "sensitive_types", "untrusted_domains", "crowded_domains"):
            value = getattr(self, name)
            if not value:
                raise LintConfigError(f"{name} must not be empty")
            object.__setattr__(self, name, frozenset(value))
        if not self.crowded_ratio_threshold > 1.0:
            raise LintConfigError("crowded_ratio_threshold must be greater than 1.0")
        if self.missing_open_severity not in SEVERITIES:
            raise LintConfigError(f"missing_open_severity must be one of {', '.join(SEVERITIES)}")

    @classmethod
    def from_text(cls, text: str) -> "LintConfig":
        """Read ``key = value`` lines; set-valued keys take comma-separated names."""
        kw: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise LintConfigError(f"line {lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in ("default_types", "sensitive_types", "untrusted_domains", "crowded_domains"):
                kw[key] = frozenset(v.strip() for v in value.split(",") if v.strip())
            elif key == "crowded_ratio_threshold":
                try:
                    kw[key] = float(value)
                except ValueError:
                    raise LintConfigError(f"line {lineno}: {value!r} is not a number") from None
            elif key == "missing_open_severity":
                kw[key] = value
            else:
                raise LintConfigError(f"line {lineno}: unknown key {key!r}")
        return cls(**kw)


@dataclass(frozen=True)
class Finding:
    detector: str
    severity: str
    subject_type: str
    explanation: str
    rule: Optional[AllowRule] = None
    summary: str = ""
    not_functional: bool = False

    @property
    def origin(self) -> Optional[Origin]:
        return self.rule.origin if self.rule is not None else None

    @property
    def rule_text(self) -> str:
        return str(self.rule) if self.rule is not None else self.summary

    def sort_key(self) -> tuple:
        origin = self.origin
        return (
            _SEVERITY_RANK[self.severity],
            self.detector,
            (origin.file, origin.line) if origin else ("", 0),
            self.rule_text,
            self.subject_type,
        )

    def as_dict(self) -> dict:
        return {
            "detector": self.detector,
            "severity": self.severity,
            "rule": self.rule_text,
            "origin": str(self.origin) if self.origin else None,
            "subject_type": self.subject_type,
            "explanation": self.explanation,
            "not_functional": self.not_functional,
        }

    def __str__(self) -> str:
        where = f"{self.origin}: " if self.origin else ""
        return f"[{self.severity}] {self.detector} {where}{self.rule_text}\n    {self.explanation}"


def _new_rules(policy: Policy, baseline: Optional[Policy]) -> List[AllowRule]:
    if baseline is None:
        return list(policy.allows)
    known = {r.key() for r in baseline.allows}
    return [r for r in policy.allows if r.key() not in known]


def _targets(policy: Policy, rule: AllowRule) -> frozenset:
    if rule.target.kind == "self":
        return resolve_type_set(policy, rule.source)
    return resolve_type_set(policy, rule.target)


def default_type_usage(policy: Policy, config: LintConfig) -> Dict[str, int]:
    """Number of allow rules whose resolved target includes each default type."""
    counts = {t: 0 for t in sorted(config.default_types)}
    for rule in policy.allows:
        for t in _targets(policy, rule) & config.default_types:
            counts[t] += 1
    return counts


def detect_default_types(policy, baseline, config) -> List[Finding]:
    out = []
    for rule in _new_rules(policy, baseline):
        hit = _targets(policy, rule) & config.default_types
        if hit:
            t = min(hit)
            out.append(Finding("L1", "warning", t,
                               f"grants access to default type {t}; a dedicated type should label this object",
                               rule))
    return out


def domain_rule_count(policy: Policy, domain: str) -> int:
    return sum(1 for r in policy.allows if domain in resolve_type_set(policy, r.source))


def is_crowded(subject_count: int, baseline_count: int, threshold: float) -> bool:
    return subject_count >= threshold * max(baseline_count, 1)


def detect_crowded_domains(policy, baseline, config) -> List[Finding]:
    if baseline is None:
        return []
    out = []
    for domain in sorted(config.crowded_domains):
        n = domain_rule_count(policy, domain)
        base = domain_rule_count(baseline, domain)
        if is_crowded(n, base, config.crowded_ratio_threshold):
            ratio = n / max(base, 1)
            out.append(Finding(
                "L2", "warning", domain,
                f"{domain} has {n} allow rules against {base} in the baseline ({ratio:.1f}x); "
                "consider moving applications into dedicated domains",
                summary=f"{domain}: {n} allow rules (baseline {base})"))
    return out


def _functional_execute_pairs(policy: Policy):
    """Predicate telling whether source s can actually run files of type t."""
    transitions = set()
    for tr in policy.transitions:
        if tr.is_process:
            subjects = resolve_type_set(policy, TypeSetExpr.single(tr.subject))
            objects = resolve_type_set(policy, TypeSetExpr.single(tr.object_type))
            transitions.update((s, o) for s in subjects for o in objects)
    no_trans: Dict[str, Set[str]] = {}
    for r in policy.allows_by_class("file"):
        if not r.av.grants("execute_no_trans"):
            continue
        for src in resolve_type_set(policy, r.source):
            no_trans.setdefault(src, set()).update(resolve_targets(policy, r, src))

    def functional(s: str, t: str) -> bool:
        return (s, t) in transitions or t in no_trans.get(s, ())

    return functional


def detect_vestigial_execute(policy, baseline, config) -> List[Finding]:
    candidates = [r for r in policy.allows_by_class("file")
                  if r.av.grants("execute") and not r.av.grants("execute_no_trans")]
    if not candidates:
        return []
    functional = _functional_execute_pairs(policy)
    out = []
    for rule in candidates:
        pairs = list(expand_rule_pairs(policy, rule))
        if pairs and not any(functional(s, t) for s, t in pairs):
            t = pairs[0][1]
            out.append(Finding(
                "L3", "warning", t,
                f"vestigial: execute on {t} is granted without execute_no_trans "
                "or a process type_transition from the source domain",
                rule))
    return out


def detect_untrusted_additions(policy, baseline, config) -> List[Finding]:
    out = []
    for rule in _new_rules(policy, baseline):
        hit = resolve_type_set(policy, rule.source) & config.untrusted_domains
        if not hit:
            continue
        d = min(hit)
        if baseline is not None:
            out.append(Finding("L4", "error", d,
                               f"adds a rule for untrusted domain {d} that the baseline does not have",
                               rule))
        elif _targets(policy, rule) & config.sensitive_types:
            out.append(Finding("L4", "warning", d,
                               f"untrusted domain {d} is granted access to a sensitive type "
                               "(no baseline to tell whether this is an addition)",
                               rule))
    return out


def detect_sensitive_exposure(policy, baseline, config) -> List[Finding]:
    out = []
    for rule in _new_rules(policy, baseline):
        hit = _targets(policy, rule) & config.sensitive_types
        if not hit:
            continue
        t = min(hit)
        untrusted = resolve_type_set(policy, rule.source) & config.untrusted_domains
        severity = "error" if untrusted else "warning"
        out.append(Finding("L5", severity, t,
                           f"grants access to security-sensitive type {t}"
                           + (" to an untrusted domain" if untrusted else ""),
                           rule))
    return out


def detect_missing_open(policy, baseline, config) -> List[Finding]:
    classes = sorted(FILE_LIKE_CLASSES - OPEN_EXEMPT_CLASSES)
    out = []
    for cls in classes:
        rules = policy.allows_by_class(cls)
        opened = set()
        for r in rules:
            if r.av.grants("open"):
                opened.update(expand_rule_pairs(policy, r))
        for r in rules:
            if r.av.all_perms or not (r.av.perms & {"read", "write"}):
                continue
            for s, t in expand_rule_pairs(policy, r):
                if (s, t) not in opened:
                    out.append(Finding(
                        "L6", config.missing_open_severity, s,
                        f"{s} gets read/write on {t}:{cls} but no rule grants open",
                        r))
                    break
    return out


DETECTORS = (
    detect_default_types,
    detect_crowded_domains,
    detect_vestigial_execute,
    detect_untrusted_additions,
    detect_sensitive_exposure,
    detect_missing_open,
)


def run_lint(policy: Policy, baseline: Optional[Policy] = None, snapshot=None,
             config: Optional[LintConfig] = None) -> List[Finding]:
    """Run every detector and return findings ordered by severity, detector, origin."""
    config = config or LintConfig()
    findings = []
    for detector in DETECTORS:
        findings.extend(detector(policy, baseline, config))
    if snapshot is not None:
        findings = refine_findings(policy, snapshot, findings)
    return sorted(findings, key=Finding.sort_key)
