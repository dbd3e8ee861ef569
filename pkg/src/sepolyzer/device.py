"""Recorded device state and combined MAC + DAC access queries.

A Snapshot is built from recorded ``ps -Z`` and ``ls -RlZ`` output rather
than a live device connection, so every query is reproducible offline.
"""

from __future__ import annotations

import json
import posixpath
import re
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

from .model import Policy, SecurityContext, resolve_targets, resolve_type_set

MODE_RE = re.compile(r"[-dlcbsp][r-][w-][xsS-][r-][w-][xsS-][r-][w-][xtT-]\Z")

FILE_CLASSES = {
    "-": "file",
    "d": "dir",
    "c": "chr_file",
    "b": "blk_file",
    "s": "sock_file",
    "p": "fifo_file",
    "l": "lnk_file",
}

ACCESS_KINDS = ("read", "write", "execute")

REQUIRED_MAC_PERMS = {
    "read": frozenset({"read", "open"}),
    "write": frozenset({"write", "open"}),
    "execute": frozenset({"execute"}),
}

_PERM_BIT = {"read": (1, "r"), "write": (2, "w"), "execute": (3, "x")}

PS_HEADER = "LABEL USER PID PPID NAME"

# Metadata for directories that only appear as block headers.
SYNTHETIC_DIR_MODE = "drwxr-xr-x"
SYNTHETIC_DIR_CONTEXT = SecurityContext("u", "object_r", "unlabeled", "s0")

SNAPSHOT_VERSION = 1


class IngestError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class PathNotInSnapshot(KeyError):
    def __init__(self, path: str):
        super().__init__(path)
        self.path = path

    def __str__(self) -> str:
        return f"path {self.path!r} is not in the snapshot"


@dataclass(frozen=True)
class ProcessEntry:
    context: SecurityContext
    user: str
    pid: int
    ppid: int
    name: str

    @property
    def domain(self) -> str:
        return self.context.type

    def as_dict(self) -> dict:
        return {"context": str(self.context), "user": self.user, "pid": self.pid,
                "ppid": self.ppid, "name": self.name}


@dataclass(frozen=True)
class FileEntry:
    path: str
    context: SecurityContext
    mode: str
    owner: str
    group: str

    def __post_init__(self):
        if not self.path.startswith("/"):
            raise ValueError(f"path {self.path!r} is not absolute")
        if not MODE_RE.match(self.mode):
            raise ValueError(f"bad mode string {self.mode!r}")

    @property
    def type(self) -> str:
        return self.context.type

    @property
    def file_class(self) -> str:
        return FILE_CLASSES[self.mode[0]]

    @property
    def is_dir(self) -> bool:
        return self.mode[0] == "d"

    def as_dict(self) -> dict:
        return {"path": self.path, "context": str(self.context), "mode": self.mode,
                "owner": self.owner, "group": self.group}


@dataclass(frozen=True)
class Snapshot:
    processes: Tuple[ProcessEntry, ...] = ()
    files: Mapping[str, FileEntry] = field(default_factory=dict)
    user_groups: Mapping[str, frozenset] = field(default_factory=dict)

    __hash__ = None  # type: ignore[assignment]

    def groups_of(self, user: str) -> frozenset:
        return self.user_groups.get(user, frozenset((user,)))

    def find_processes(self, name: str) -> List[ProcessEntry]:
        return sorted((p for p in self.processes if p.name == name), key=lambda p: p.pid)

    def find_pid(self, pid: int) -> Optional[ProcessEntry]:
        for p in self.processes:
            if p.pid == pid:
                return p
        return None


def ancestors(path: str) -> List[str]:
    """Proper ancestor directories of ``path``, outermost first."""
    if path == "/":
        return []
    out = []
    parent = posixpath.dirname(path.rstrip("/"))
    while True:
        out.append(parent)
        if parent == "/":
            break
        parent = posixpath.dirname(parent)
    return out[::-1]


def check_closure(files: Mapping[str, FileEntry]) -> Optional[str]:
    """Return the first path whose ancestor is missing or not a directory."""
    for path in sorted(files):
        for anc in ancestors(path):
            entry = files.get(anc)
            if entry is None or not entry.is_dir:
                return path
    return None


# ingest -----------------------------------------------------------------


def ingest_ps(text: str) -> List[ProcessEntry]:
    processes = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields_ = line.split(None, 4)
        if " ".join(fields_) == PS_HEADER:
            continue
        if len(fields_) != 5:
            raise IngestError(lineno, f"expected 5 fields (LABEL USER PID PPID NAME), got {len(fields_)}")
        label, user, pid, ppid, name = fields_
        try:
            context = SecurityContext.parse(label)
        except ValueError as exc:
            raise IngestError(lineno, str(exc)) from None
        try:
            pid_n, ppid_n = int(pid), int(ppid)
        except ValueError:
            raise IngestError(lineno, f"non-integer pid/ppid {pid!r} {ppid!r}") from None
        if pid_n <= 0 or ppid_n < 0:
            raise IngestError(lineno, f"invalid pid/ppid {pid_n} {ppid_n}")
        processes.append(ProcessEntry(context, user, pid_n, ppid_n, name.strip()))
    return processes


def ingest_ls(text: str) -> Dict[str, FileEntry]:
    """Parse ``ls -RlZ``-style blocks into a closed path map.

    Each block starts with ``DIR:`` and lists ``MODE OWNER GROUP LABEL NAME``
    lines.  An entry named ``.`` describes the block directory itself.
    Directories known only from headers are synthesized with placeholder
    metadata.
    """
    files: Dict[str, FileEntry] = {}
    synthetic: Dict[str, int] = {}
    line_of: Dict[str, int] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            current = None
            continue
        if current is None:
            if not line.endswith(":") or not line.startswith("/"):
                raise IngestError(lineno, f"expected a 'PATH:' block header, got {line!r}")
            current = posixpath.normpath(line[:-1]) if line != "/:" else "/"
            if current.startswith("//"):
                current = "/" + current.lstrip("/")
            for d in ancestors(current) + [current]:
                if d not in files:
                    synthetic[d] = line_of[d] = lineno
                    files[d] = FileEntry(d, SYNTHETIC_DIR_CONTEXT, SYNTHETIC_DIR_MODE, "root", "root")
            continue
        parts = line.split(None, 4)
        if len(parts) != 5:
            raise IngestError(lineno, "expected MODE OWNER GROUP LABEL NAME")
        mode, owner, group, label, name = parts
        if not MODE_RE.match(mode):
            raise IngestError(lineno, f"bad mode string {mode!r}")
        try:
            context = SecurityContext.parse(label)
        except ValueError as exc:
            raise IngestError(lineno, str(exc)) from None
        if mode[0] == "l" and " -> " in name:
            name = name.split(" -> ", 1)[0]
        if name == ".":
            path = current
        elif "/" in name or name == "..":
            raise IngestError(lineno, f"bad entry name {name!r}")
        else:
            path = posixpath.join(current, name)
        if path in files and path not in synthetic and files[path] != FileEntry(path, context, mode, owner, group):
            raise IngestError(lineno, f"conflicting entries for {path}")
        synthetic.pop(path, None)
        line_of[path] = lineno
        files[path] = FileEntry(path, context, mode, owner, group)
    for path in sorted(files):
        for anc in ancestors(path):
            if not files[anc].is_dir:
                raise IngestError(line_of[path], f"ancestor {anc} of {path} is not a directory")
    return files


def ingest_groups(text: str) -> Dict[str, frozenset]:
    """``USER GROUP...`` per line; the user is always a member of its own group."""
    groups: Dict[str, frozenset] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        user, *rest = line.replace(",", " ").split()
        groups[user] = groups.get(user, frozenset((user,))) | frozenset(rest)
    return groups


def build_snapshot(processes: Iterable[ProcessEntry], files: Mapping[str, FileEntry],
                   user_groups: Optional[Mapping[str, Iterable[str]]] = None) -> Snapshot:
    files = dict(files)
    bad = check_closure(files)
    if bad is not None:
        raise ValueError(f"ancestor closure violated at {bad}")
    groups = {u: frozenset(g) for u, g in (user_groups or {}).items()}
    return Snapshot(tuple(sorted(processes, key=lambda p: p.pid)), files, groups)


# persistence --------------------------------------------------------------


def snapshot_to_json(snapshot: Snapshot) -> str:
    doc = {
        "version": SNAPSHOT_VERSION,
        "processes": [p.as_dict() for p in sorted(snapshot.processes, key=lambda p: p.pid)],
        "files": [snapshot.files[path].as_dict() for path in sorted(snapshot.files)],
        "userGroups": {u: sorted(g) for u, g in sorted(snapshot.user_groups.items())},
    }
    return json.dumps(doc, indent=2) + "\n"


def snapshot_from_json(text: str) -> Snapshot:
    doc = json.loads(text)
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
    processes = [
        ProcessEntry(SecurityContext.parse(p["context"]), p["user"], int(p["pid"]), int(p["ppid"]), p["name"])
        for p in doc.get("processes", [])
    ]
    files = {}
    for f in doc.get("files", []):
        files[f["path"]] = FileEntry(f["path"], SecurityContext.parse(f["context"]), f["mode"], f["owner"], f["group"])
    return build_snapshot(processes, files, doc.get("userGroups", {}))


def load_snapshot(path) -> Snapshot:
    with open(path, encoding="utf-8") as fh:
        return snapshot_from_json(fh.read())


# access checks ---------------------------------------------------------------


def mac_allows(policy: Policy, domain: str, target_type: str, cls: str, perms: Iterable[str]) -> bool:
    """True iff the allow rules together grant every permission in ``perms``."""
    needed = set(perms)
    if not needed:
        raise ValueError("perms must be nonempty")
    granted = granted_perms(policy, domain, target_type, cls)
    return granted is None or needed <= granted


def granted_perms(policy: Policy, domain: str, target_type: str, cls: str) -> Optional[frozenset]:
    """Union of permissions granted to (domain, target_type, cls); None means all."""
    key = ("granted", domain, target_type, cls)
    if key in policy._cache:
        return policy._cache[key]
    granted: Optional[set] = set()
    for rule in policy.allows_by_class(cls):
        if domain not in resolve_type_set(policy, rule.source):
            continue
        if target_type not in resolve_targets(policy, rule, domain):
            continue
        if rule.av.all_perms:
            granted = None
            break
        granted |= rule.av.perms
    result = None if granted is None else frozenset(granted)
    policy._cache[key] = result
    return result


def dac_allows(snapshot: Snapshot, user: str, entry: FileEntry, kind: str) -> bool:
    if user == "root":
        return True
    if user == entry.owner:
        triad = 0
    elif entry.group in snapshot.groups_of(user):
        triad = 1
    else:
        triad = 2
    offset, letter = _PERM_BIT[kind]
    ch = entry.mode[triad * 3 + offset]
    if letter == "x":
        return ch in "xst"
    return ch == letter


@dataclass(frozen=True)
class TraceStep:
    step: str
    path: str
    verdict: bool

    def __str__(self) -> str:
        return f"{self.step} {self.path}: {'ok' if self.verdict else 'DENIED'}"


@dataclass(frozen=True)
class AccessResult:
    allowed: bool
    trace: Tuple[TraceStep, ...]

    def failed_steps(self) -> List[TraceStep]:
        return [s for s in self.trace if not s.verdict]


def can_access(policy: Policy, snapshot: Snapshot, process: ProcessEntry, path: str, kind: str) -> AccessResult:
    """Check whether ``process`` can reach ``path`` and perform ``kind`` on it.

    Every ancestor directory needs DAC execute and MAC ``dir search``; the
    leaf needs the DAC bit for ``kind`` and the MAC permissions in
    REQUIRED_MAC_PERMS on its class.  All steps are evaluated so the trace
    is complete.
    """
    if kind not in REQUIRED_MAC_PERMS:
        raise ValueError(f"unknown access kind {kind!r}")
    entry = snapshot.files.get(path)
    if entry is None:
        raise PathNotInSnapshot(path)
    trace = []
    for anc in ancestors(path):
        d = snapshot.files[anc]
        trace.append(TraceStep("dac-search", anc, dac_allows(snapshot, process.user, d, "execute")))
        trace.append(TraceStep("mac-search", anc, mac_allows(policy, process.domain, d.type, "dir", {"search"})))
    trace.append(TraceStep(f"dac-{kind}", path, dac_allows(snapshot, process.user, entry, kind)))
    trace.append(TraceStep(f"mac-{kind}", path, mac_allows(
        policy, process.domain, entry.type, entry.file_class, REQUIRED_MAC_PERMS[kind])))
    return AccessResult(all(s.verdict for s in trace), tuple(trace))


def query_files(policy: Policy, snapshot: Snapshot, process: ProcessEntry, kind: str) -> List[str]:
    return [path for path in sorted(snapshot.files)
            if can_access(policy, snapshot, process, path, kind).allowed]


def query_processes(policy: Policy, snapshot: Snapshot, path: str, kind: str) -> List[ProcessEntry]:
    if path not in snapshot.files:
        raise PathNotInSnapshot(path)
    return [p for p in sorted(snapshot.processes, key=lambda p: p.pid)
            if can_access(policy, snapshot, p, path, kind).allowed]


# lint refinement ---------------------------------------------------------------

NOT_FUNCTIONAL = "not functional (unreachable on device)"
_DOWNGRADE = {"error": "warning", "warning": "info", "info": "info"}


def _granted_kinds(av) -> List[str]:
    if av.all_perms:
        return list(ACCESS_KINDS)
    kinds = []
    if "read" in av.perms:
        kinds.append("read")
    if av.perms & {"write", "append"}:
        kinds.append("write")
    if "execute" in av.perms:
        kinds.append("execute")
    return kinds


def refine_findings(policy: Policy, snapshot: Snapshot, findings) -> list:
    """Downgrade L3/L4/L5 findings whose rule no observed process can exercise.

    A finding is touched only with positive evidence: labeled files of the
    rule's class exist in the snapshot and some process runs in one of the
    rule's source domains, yet none of them can access any of those files.
    """
    out = []
    for finding in findings:
        rule = finding.rule
        if finding.detector not in ("L3", "L4", "L5") or rule is None:
            out.append(finding)
            continue
        sources = resolve_type_set(policy, rule.source)
        procs = [p for p in snapshot.processes if p.domain in sources]
        kinds = _granted_kinds(rule.av)
        reachable = False
        evidence = False
        for proc in procs:
            targets = resolve_targets(policy, rule, proc.domain)
            for path in sorted(snapshot.files):
                entry = snapshot.files[path]
                if entry.type not in targets or entry.file_class != rule.av.cls:
                    continue
                evidence = True
                if any(can_access(policy, snapshot, proc, path, k).allowed for k in kinds):
                    reachable = True
                    break
            if reachable:
                break
        if evidence and kinds and not reachable:
            finding = replace(
                finding,
                severity=_DOWNGRADE[finding.severity],
                explanation=f"{finding.explanation}; {NOT_FUNCTIONAL}",
                not_functional=True,
            )
        out.append(finding)
    return out
