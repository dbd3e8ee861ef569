"""Parser and serializer for expanded policy.conf-style Type Enforcement text.

Errors are collected per statement: a malformed statement is skipped up to
its terminating ``;`` and parsing resumes with the next one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import List, Optional

from .model import (
    ALL_TYPES,
    SELF,
    AccessVector,
    AllowRule,
    GenfsContext,
    InitialSid,
    NeverallowRule,
    Origin,
    Policy,
    SecurityContext,
    TypeSetExpr,
    TypeTransitionRule,
    build_policy,
)

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<path>/[^\s;]*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.-]*)
  | (?P<number>[0-9][A-Za-z0-9_.-]*)
  | (?P<punct>[{}:;,*~-])
  | (?P<other>.)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class ParseError:
    line: int
    column: int
    message: str
    snippet: str

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.message}\n    {self.snippet}"


class PolicySyntaxError(Exception):
    """Raised by parse_policy; ``errors`` holds every ParseError found."""

    def __init__(self, errors: List[ParseError], filename: str = "<string>"):
        self.errors = sorted(errors, key=lambda e: (e.line, e.column))
        self.filename = filename
        lines = [f"{filename}: {len(self.errors)} syntax error(s)"]
        lines += [f"{filename}:{e}" for e in self.errors]
        super().__init__("\n".join(lines))


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int
    line: int
    col: int


class _StatementError(Exception):
    def __init__(self, token: _Token, message: str):
        super().__init__(message)
        self.token = token
        self.message = message


def _tokenize(text: str):
    line, line_start = 1, 0
    tokens = []
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        start = m.start()
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, m.group(), start, line, start - line_start + 1))
        newlines = m.group().count("\n")
        if newlines:
            line += newlines
            line_start = m.start() + m.group().rindex("\n") + 1
    return tokens


def _split_statements(tokens):
    """Group tokens into statements; the last group may lack its ``;``."""
    stmt = []
    for tok in tokens:
        if tok.kind == "punct" and tok.text == ";":
            yield stmt, tok
            stmt = []
        else:
            stmt.append(tok)
    if stmt:
        yield stmt, None


class _Cursor:
    def __init__(self, tokens, end: _Token):
        self.tokens = tokens
        self.i = 0
        self.end = end

    def peek(self) -> Optional[_Token]:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def next(self, what: str) -> _Token:
        tok = self.peek()
        if tok is None:
            raise _StatementError(self.end, f"expected {what} before ';'")
        self.i += 1
        return tok

    def ident(self, what: str = "identifier") -> str:
        tok = self.next(what)
        if tok.kind != "ident":
            raise _StatementError(tok, f"expected {what}, found {tok.text!r}")
        return tok.text

    def punct(self, text: str) -> _Token:
        tok = self.next(repr(text))
        if tok.text != text or tok.kind != "punct":
            raise _StatementError(tok, f"expected {text!r}, found {tok.text!r}")
        return tok

    def at(self, text: str) -> bool:
        tok = self.peek()
        return tok is not None and tok.kind == "punct" and tok.text == text

    def done(self):
        tok = self.peek()
        if tok is not None:
            raise _StatementError(tok, f"unexpected {tok.text!r}")


def _type_set(cur: _Cursor, target: bool) -> TypeSetExpr:
    tok = cur.next("type set")
    if tok.kind == "punct" and tok.text == "*":
        return ALL_TYPES
    if tok.kind == "ident":
        if tok.text == "self":
            if not target:
                raise _StatementError(tok, "'self' is only allowed as a target")
            return SELF
        return TypeSetExpr.single(tok.text)
    if tok.kind == "punct" and tok.text == "~":
        raise _StatementError(tok, "the '~' complement operator is not supported")
    if not (tok.kind == "punct" and tok.text == "{"):
        raise _StatementError(tok, f"expected type set, found {tok.text!r}")
    positives, negatives = [], []
    while True:
        tok = cur.next("'}'")
        if tok.kind == "punct" and tok.text == "}":
            break
        negate = tok.kind == "punct" and tok.text == "-"
        if negate:
            tok = cur.next("identifier after '-'")
        if tok.kind != "ident":
            if tok.text == "~":
                raise _StatementError(tok, "the '~' complement operator is not supported")
            raise _StatementError(tok, f"expected identifier in type set, found {tok.text!r}")
        if tok.text == "self":
            raise _StatementError(tok, "'self' is not allowed inside a braced set")
        (negatives if negate else positives).append(tok.text)
    if not positives:
        raise _StatementError(tok, "type set has no positive identifier")
    return TypeSetExpr.of(positives, negatives)


def _perm_list(cur: _Cursor) -> List[str]:
    cur.punct("{")
    perms = []
    while not cur.at("}"):
        perms.append(cur.ident("permission"))
    closing = cur.punct("}")
    if not perms:
        raise _StatementError(closing, "empty permission list")
    return perms


def _access_vector(cur: _Cursor) -> AccessVector:
    cur.punct(":")
    cls = cur.ident("class")
    if cur.at("*"):
        cur.next("*")
        return AccessVector(cls, all_perms=True)
    if cur.at("{"):
        return AccessVector(cls, frozenset(_perm_list(cur)))
    tok = cur.peek()
    if tok is not None and tok.kind == "punct" and tok.text == "~":
        raise _StatementError(tok, "the '~' complement operator is not supported")
    return AccessVector(cls, frozenset([cur.ident("permission")]))


def _raw_until_end(text: str, cur: _Cursor, what: str) -> tuple:
    first = cur.next(what)
    end = cur.end.pos if cur.end is not None else len(text)
    cur.i = len(cur.tokens)
    return first, text[first.pos:end].strip()


def _context(text: str, cur: _Cursor) -> SecurityContext:
    first, raw = _raw_until_end(text, cur, "security context")
    try:
        return SecurityContext.parse(raw)
    except ValueError as exc:
        raise _StatementError(first, str(exc)) from None


class _Builder:
    def __init__(self, text: str, filename: str, strict: bool):
        self.text = text
        self.lines = text.split("\n")
        self.filename = filename
        self.strict = strict
        self.errors: List[ParseError] = []
        self.classes: dict = {}
        self.attributes: dict = {}
        self.types: dict = {}
        self.memberships: list = []
        self.sids: dict = {}
        self.rules: list = []
        self.unknown: set = set()

    def error(self, tok: _Token, message: str):
        snippet = self.lines[tok.line - 1] if tok.line - 1 < len(self.lines) else ""
        self.errors.append(ParseError(tok.line, tok.col, message, snippet.rstrip("\r")))

    def origin(self, tok: _Token) -> Origin:
        return Origin(self.filename, tok.line)

    # declarations ---------------------------------------------------

    def stmt_class(self, cur, head):
        name = cur.ident("class name")
        perms = _perm_list(cur) if cur.at("{") else []
        cur.done()
        self.classes.setdefault(name, set()).update(perms)

    def stmt_sid(self, cur, head):
        name = cur.ident("sid name")
        label = _context(self.text, cur) if cur.peek() is not None else None
        cur.done()
        old = self.sids.get(name)
        if old is not None and old.label is not None and label is not None and old.label != label:
            raise _StatementError(head, f"conflicting contexts for initial sid {name!r}")
        if old is None or label is not None:
            self.sids[name] = InitialSid(name, label)

    def stmt_attribute(self, cur, head):
        name = cur.ident("attribute name")
        cur.done()
        if name in self.types:
            raise _StatementError(head, f"{name!r} is already declared as a type")
        if name in self.attributes:
            raise _StatementError(head, f"duplicate attribute {name!r}")
        self.attributes[name] = head

    def stmt_type(self, cur, head):
        name = cur.ident("type name")
        attrs = []
        while cur.at(","):
            cur.next(",")
            attrs.append((cur.peek(), cur.ident("attribute name")))
        cur.done()
        if name in self.attributes:
            raise _StatementError(head, f"{name!r} is already declared as an attribute")
        if name in self.types:
            raise _StatementError(head, f"duplicate type declaration {name!r}")
        self.types[name] = head
        if attrs:
            self.memberships.append((head, name, attrs))

    def stmt_typeattribute(self, cur, head):
        name = cur.ident("type name")
        attrs = [(cur.peek(), cur.ident("attribute name"))]
        while cur.at(","):
            cur.next(",")
            attrs.append((cur.peek(), cur.ident("attribute name")))
        cur.done()
        self.memberships.append((head, name, attrs))

    # rules ----------------------------------------------------------

    def stmt_avrule(self, cur, head, rule_cls):
        source = _type_set(cur, target=False)
        target = _type_set(cur, target=True)
        av = _access_vector(cur)
        cur.done()
        self.rules.append((head, rule_cls(source, target, av, self.origin(head))))

    def stmt_type_transition(self, cur, head):
        subject = cur.ident("source type")
        obj = cur.ident("target type")
        cur.punct(":")
        cls = cur.ident("class")
        result = cur.ident("result type")
        cur.done()
        self.rules.append((head, TypeTransitionRule(subject, obj, cls, result, self.origin(head))))

    def stmt_genfscon(self, cur, head):
        fs = cur.ident("filesystem")
        tok = cur.next("path")
        if tok.kind != "path":
            raise _StatementError(tok, f"expected absolute path, found {tok.text!r}")
        label = _context(self.text, cur)
        cur.done()
        self.rules.append((head, GenfsContext(fs, tok.text, label, self.origin(head))))

    def statement(self, toks, end):
        head = toks[0]
        if end is None:
            raise _StatementError(toks[-1], "missing ';' at end of statement")
        if head.kind != "ident":
            raise _StatementError(head, f"expected statement keyword, found {head.text!r}")
        cur = _Cursor(toks[1:], end)
        kw = head.text
        if kw == "allow":
            self.stmt_avrule(cur, head, AllowRule)
        elif kw == "neverallow":
            self.stmt_avrule(cur, head, NeverallowRule)
        elif kw in ("class", "sid", "attribute", "type", "typeattribute",
                    "type_transition", "genfscon"):
            getattr(self, "stmt_" + kw)(cur, head)
        else:
            raise _StatementError(head, f"unknown statement {kw!r}")

    # second pass ----------------------------------------------------

    def check_name(self, tok, name, kinds, bad):
        if name in self.types and "type" in kinds:
            return
        if name in self.attributes and "attribute" in kinds:
            return
        if self.strict:
            bad.append((tok, f"undeclared type or attribute {name!r}"))
        else:
            self.unknown.add(("type", name))

    def check_av(self, tok, av, bad):
        if av.cls not in self.classes:
            if self.strict:
                bad.append((tok, f"undeclared class {av.cls!r}"))
                return
            self.unknown.add(("class", av.cls))
        known = self.classes.get(av.cls, set())
        for p in sorted(av.perms - known):
            if self.strict and av.cls in self.classes:
                bad.append((tok, f"permission {p!r} is not declared for class {av.cls!r}"))
            else:
                self.unknown.add(("permission", f"{av.cls}:{p}"))

    def resolve(self):
        type_attrs = {name: set() for name in self.types}
        for head, name, attrs in self.memberships:
            if name not in self.types:
                self.error(head, f"typeattribute on undeclared type {name!r}")
                continue
            missing = [(tok, a) for tok, a in attrs if a not in self.attributes]
            if missing:
                tok, a = missing[0]
                self.error(tok, f"undeclared attribute {a!r}")
                continue
            type_attrs[name].update(a for _, a in attrs)

        kept = []
        for head, rule in self.rules:
            bad: list = []
            kinds = ("type", "attribute")
            if isinstance(rule, (AllowRule, NeverallowRule)):
                for name in rule.source.identifiers + rule.target.identifiers:
                    self.check_name(head, name, kinds, bad)
                self.check_av(head, rule.av, bad)
            elif isinstance(rule, TypeTransitionRule):
                for name in (rule.subject, rule.object_type, rule.result):
                    self.check_name(head, name, kinds, bad)
                if rule.cls not in self.classes:
                    if self.strict:
                        bad.append((head, f"undeclared class {rule.cls!r}"))
                    else:
                        self.unknown.add(("class", rule.cls))
            elif isinstance(rule, GenfsContext):
                self.check_name(head, rule.label.type, ("type",), bad)
            if bad:
                self.error(*bad[0])
            else:
                kept.append(rule)

        return build_policy(
            types=type_attrs,
            attributes=self.attributes,
            classes=self.classes,
            allows=[r for r in kept if isinstance(r, AllowRule)],
            neverallows=[r for r in kept if isinstance(r, NeverallowRule)],
            transitions=[r for r in kept if isinstance(r, TypeTransitionRule)],
            genfs=[r for r in kept if isinstance(r, GenfsContext)],
            sids=self.sids.values(),
            unknown=self.unknown,
        )


def parse_policy(text: str, filename: str = "<string>", strict: bool = False) -> Policy:
    """Parse policy text into a Policy.

    Raises PolicySyntaxError listing every malformed statement.  With
    ``strict`` set, references to undeclared types, classes or permissions
    are errors; otherwise they are recorded in ``Policy.unknown``.
    """
    builder = _Builder(text, filename, strict)
    for toks, end in _split_statements(_tokenize(text)):
        if not toks:
            builder.error(end, "empty statement")
            continue
        try:
            builder.statement(toks, end)
        except _StatementError as exc:
            builder.error(exc.token, exc.message)
    policy = builder.resolve()
    if builder.errors:
        raise PolicySyntaxError(builder.errors, filename)
    return policy


def parse_policy_file(path, strict: bool = False) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return parse_policy(fh.read(), filename=str(path), strict=strict)


def serialize_policy(policy: Policy) -> str:
    out = []
    for cls in sorted(policy.classes):
        perms = policy.permissions.get(cls, frozenset())
        if perms:
            out.append(f"class {cls} {{ {' '.join(sorted(perms))} }};")
        else:
            out.append(f"class {cls};")
    out.extend(str(sid) for sid in policy.sids)
    out.extend(f"attribute {a};" for a in sorted(policy.attributes))
    out.extend(f"type {t};" for t in sorted(policy.types))
    for t in sorted(policy.types):
        attrs = policy.types[t].attributes
        if attrs:
            out.append(f"typeattribute {t} {', '.join(sorted(attrs))};")
    for group in (policy.allows, policy.neverallows, policy.transitions, policy.genfs):
        out.extend(str(rule) for rule in group)
    return "".join(line + "\n" for line in out)
