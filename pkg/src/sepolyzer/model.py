"""Type Enforcement policy model and type-set algebra."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

IDENTIFIER_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.-]*\Z")

DEFAULT_DOMAIN_ATTRIBUTE = "domain"


class PolicyError(Exception):
    """Base class for model-level errors."""


class UnresolvedIdentifier(PolicyError):
    def __init__(self, name: str):
        super().__init__(f"identifier {name!r} is neither a type nor an attribute")
        self.name = name


class SelfWithoutContext(PolicyError):
    def __init__(self):
        super().__init__("'self' used without a source type to bind it to")


class NameCollision(PolicyError):
    def __init__(self, name: str):
        super().__init__(f"{name!r} is declared both as a type and as an attribute")
        self.name = name


def is_identifier(name: str) -> bool:
    return bool(IDENTIFIER_RE.match(name))


@dataclass(frozen=True)
class Origin:
    file: str
    line: int

    def __str__(self) -> str:
        return f"{self.file}:{self.line}"


NO_ORIGIN = Origin("<memory>", 0)


@dataclass(frozen=True)
class SecurityContext:
    user: str
    role: str
    type: str
    range: str

    @classmethod
    def parse(cls, text: str) -> "SecurityContext":
        parts = text.strip().split(":", 3)
        if len(parts) != 4 or not all(parts):
            raise ValueError(f"invalid security context {text!r}")
        user, role, type_, range_ = parts
        if not is_identifier(type_):
            raise ValueError(f"invalid type {type_!r} in security context {text!r}")
        return cls(user, role, type_, range_)

    def __str__(self) -> str:
        return f"{self.user}:{self.role}:{self.type}:{self.range}"


@dataclass(frozen=True)
class SecurityType:
    name: str
    attributes: frozenset = frozenset()


@dataclass(frozen=True)
class Attribute:
    name: str
    members: frozenset = frozenset()


@dataclass(frozen=True)
class TypeSetExpr:
    """A source or target set as written in a rule.

    ``kind`` is one of ``single``, ``set``, ``all`` or ``self``.  Only ``set``
    uses ``negatives``; ``single`` keeps its one name in ``positives``.
    """

    kind: str
    positives: tuple = ()
    negatives: tuple = ()

    @classmethod
    def single(cls, name: str) -> "TypeSetExpr":
        return cls("single", (name,))

    @classmethod
    def of(cls, positives: Iterable[str], negatives: Iterable[str] = ()) -> "TypeSetExpr":
        positives = tuple(positives)
        if not positives:
            raise ValueError("a braced type set needs at least one positive identifier")
        return cls("set", positives, tuple(negatives))

    @property
    def identifiers(self) -> tuple:
        return self.positives + self.negatives

    def normalized(self) -> tuple:
        """Order-insensitive key; ``{a}`` and ``a`` compare equal."""
        if self.kind == "set" and len(self.positives) == 1 and not self.negatives:
            return ("single", self.positives, ())
        if self.kind == "set":
            return ("set", tuple(sorted(set(self.positives))), tuple(sorted(set(self.negatives))))
        return (self.kind, self.positives, ())

    def __str__(self) -> str:
        if self.kind == "all":
            return "*"
        if self.kind == "self":
            return "self"
        if self.kind == "single":
            return self.positives[0]
        items = list(self.positives) + ["-" + n for n in self.negatives]
        return "{ " + " ".join(items) + " }"


ALL_TYPES = TypeSetExpr("all")
SELF = TypeSetExpr("self")


@dataclass(frozen=True)
class AccessVector:
    cls: str
    perms: frozenset = frozenset()
    all_perms: bool = False

    def __post_init__(self):
        if not self.all_perms and not self.perms:
            raise ValueError("an access vector needs permissions or the '*' marker")

    def grants(self, perm: str) -> bool:
        return self.all_perms or perm in self.perms

    def perms_text(self) -> str:
        if self.all_perms:
            return "*"
        if len(self.perms) == 1:
            return next(iter(self.perms))
        return "{ " + " ".join(sorted(self.perms)) + " }"

    def __str__(self) -> str:
        return f"{self.cls} {self.perms_text()}"


def av_matches(rule_av: AccessVector, probe_class: str, probe_perms: Iterable[str]) -> bool:
    probe_perms = set(probe_perms)
    if not probe_perms:
        raise ValueError("probe permissions must be nonempty")
    if rule_av.cls != probe_class:
        return False
    return rule_av.all_perms or bool(rule_av.perms & probe_perms)


@dataclass(frozen=True)
class _AvRule:
    source: TypeSetExpr
    target: TypeSetExpr
    av: AccessVector
    origin: Origin = field(default=NO_ORIGIN, compare=False)

    keyword = "allow"

    def __post_init__(self):
        if self.source.kind == "self":
            raise ValueError("'self' is only legal in target position")

    def key(self) -> tuple:
        """Structural identity used for diffs and baseline subtraction."""
        perms = ("*",) if self.av.all_perms else tuple(sorted(self.av.perms))
        return (self.keyword, self.source.normalized(), self.target.normalized(), self.av.cls, perms)

    def __str__(self) -> str:
        return f"{self.keyword} {self.source} {self.target}:{self.av.cls} {self.av.perms_text()};"


class AllowRule(_AvRule):
    keyword = "allow"


class NeverallowRule(_AvRule):
    keyword = "neverallow"


@dataclass(frozen=True)
class TypeTransitionRule:
    subject: str
    object_type: str
    cls: str
    result: str
    origin: Origin = field(default=NO_ORIGIN, compare=False)

    @property
    def is_process(self) -> bool:
        return self.cls == "process"

    def key(self) -> tuple:
        return ("type_transition", self.subject, self.object_type, self.cls, self.result)

    def __str__(self) -> str:
        return f"type_transition {self.subject} {self.object_type}:{self.cls} {self.result};"


@dataclass(frozen=True)
class GenfsContext:
    filesystem: str
    path: str
    label: SecurityContext
    origin: Origin = field(default=NO_ORIGIN, compare=False)

    def __post_init__(self):
        if not self.path.startswith("/"):
            raise ValueError(f"genfs path {self.path!r} must begin with '/'")

    def key(self) -> tuple:
        return ("genfscon", self.filesystem, self.path, str(self.label))

    def __str__(self) -> str:
        return f"genfscon {self.filesystem} {self.path} {self.label};"


@dataclass(frozen=True)
class InitialSid:
    name: str
    label: Optional[SecurityContext] = None

    def __str__(self) -> str:
        if self.label is None:
            return f"sid {self.name};"
        return f"sid {self.name} {self.label};"


@dataclass(frozen=True, eq=True)
class Policy:
    """Parsed, indexed policy.  Treat as immutable once built."""

    types: Mapping = field(default_factory=dict)
    attributes: Mapping = field(default_factory=dict)
    classes: frozenset = frozenset()
    permissions: Mapping = field(default_factory=dict)
    allows: tuple = ()
    neverallows: tuple = ()
    transitions: tuple = ()
    genfs: tuple = ()
    sids: tuple = ()
    unknown: frozenset = frozenset()
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    __hash__ = None  # type: ignore[assignment]

    @property
    def domain_types(self) -> frozenset:
        return self.members_of(DEFAULT_DOMAIN_ATTRIBUTE)

    def members_of(self, attribute: str) -> frozenset:
        attr = self.attributes.get(attribute)
        return attr.members if attr else frozenset()

    def is_declared(self, name: str) -> bool:
        return name in self.types or name in self.attributes

    def all_types(self) -> frozenset:
        cached = self._cache.get("all")
        if cached is None:
            cached = self._cache["all"] = frozenset(self.types)
        return cached

    def perm_universe(self, cls: str) -> frozenset:
        """Declared permissions of ``cls`` plus every one mentioned in a rule."""
        key = ("perms", cls)
        cached = self._cache.get(key)
        if cached is None:
            perms = set(self.permissions.get(cls, ()))
            for rule in self.allows + self.neverallows:
                if rule.av.cls == cls:
                    perms |= rule.av.perms
            cached = self._cache[key] = frozenset(perms)
        return cached

    def expand_perms(self, av: AccessVector) -> frozenset:
        if av.all_perms:
            return self.perm_universe(av.cls) | {"*"}
        return av.perms

    def allows_by_class(self, cls: str) -> tuple:
        index = self._cache.get("by_class")
        if index is None:
            index = {}
            for rule in self.allows:
                index.setdefault(rule.av.cls, []).append(rule)
            index = self._cache["by_class"] = {k: tuple(v) for k, v in index.items()}
        return index.get(cls, ())


def build_policy(
    types: Mapping[str, Iterable[str]] = (),
    attributes: Iterable[str] = (),
    classes: Mapping[str, Iterable[str]] = (),
    allows: Iterable[AllowRule] = (),
    neverallows: Iterable[NeverallowRule] = (),
    transitions: Iterable[TypeTransitionRule] = (),
    genfs: Iterable[GenfsContext] = (),
    sids: Iterable[InitialSid] = (),
    unknown: Iterable[tuple] = (),
) -> Policy:
    """Assemble a Policy, deriving the attribute member index from type memberships."""
    types = dict(types)
    attributes = set(attributes)
    for name in types:
        if name in attributes:
            raise NameCollision(name)
    members: dict = {a: set() for a in attributes}
    type_objs = {}
    for name, attrs in types.items():
        attrs = frozenset(attrs)
        for a in attrs:
            if a not in members:
                raise UnresolvedIdentifier(a)
            members[a].add(name)
        type_objs[name] = SecurityType(name, attrs)
    attr_objs = {a: Attribute(a, frozenset(m)) for a, m in members.items()}
    classes = dict(classes)
    return Policy(
        types=type_objs,
        attributes=attr_objs,
        classes=frozenset(classes),
        permissions={c: frozenset(p) for c, p in classes.items()},
        allows=tuple(allows),
        neverallows=tuple(neverallows),
        transitions=tuple(transitions),
        genfs=tuple(genfs),
        sids=tuple(sids),
        unknown=frozenset(unknown),
    )


def _resolve_name(policy: Policy, name: str, strict: bool) -> frozenset:
    if name in policy.attributes:
        return policy.attributes[name].members
    if name in policy.types:
        return frozenset((name,))
    if strict:
        raise UnresolvedIdentifier(name)
    # lenient: an undeclared name stands for itself
    return frozenset((name,))


def resolve_type_set(
    policy: Policy,
    expr: TypeSetExpr,
    self_type: Optional[str] = None,
    strict: bool = False,
) -> frozenset:
    """Concrete type names denoted by ``expr``.

    Attributes expand to their members, ``*`` to every declared type and
    ``self`` to ``{self_type}``.  Negatives are subtracted after the
    positives are unioned.
    """
    if expr.kind == "self":
        if self_type is None:
            raise SelfWithoutContext()
        return frozenset((self_type,))
    key = ("resolve", expr, strict)
    cached = policy._cache.get(key)
    if cached is not None:
        return cached
    if expr.kind == "all":
        result = policy.all_types()
    else:
        pos: set = set()
        for name in expr.positives:
            pos |= _resolve_name(policy, name, strict)
        for name in expr.negatives:
            pos -= _resolve_name(policy, name, strict)
        result = frozenset(pos)
    policy._cache[key] = result
    return result


def resolve_targets(policy: Policy, rule: _AvRule, source: str) -> frozenset:
    """Targets of ``rule`` seen from one concrete source type (binds ``self``)."""
    if rule.target.kind == "self":
        return frozenset((source,))
    return resolve_type_set(policy, rule.target)


def expand_rule_pairs(policy: Policy, rule: _AvRule):
    """Yield every concrete (source, target) pair of an access-vector rule."""
    sources = resolve_type_set(policy, rule.source)
    if rule.target.kind == "self":
        for s in sorted(sources):
            yield s, s
        return
    targets = resolve_type_set(policy, rule.target)
    for s in sorted(sources):
        for t in sorted(targets):
            yield s, t
