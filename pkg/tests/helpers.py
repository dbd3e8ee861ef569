"""Random policy/snapshot generators and brute-force oracles for the tests.

The oracles deliberately avoid the package's resolution helpers: attribute
membership is rebuilt from each type's own attribute list and every rule is
expanded to concrete tuples.
"""

import random

from hypothesis import strategies as st

from sepolyzer.assertions import check_neverallows
from sepolyzer.device import FileEntry, ProcessEntry, Snapshot, ancestors
from sepolyzer.model import SecurityContext
from sepolyzer.parser import parse_policy

CLASSES = {
    "file": ["read", "write", "append", "open", "getattr", "execute", "execute_no_trans", "ioctl"],
    "dir": ["read", "search", "open", "write"],
    "process": ["transition", "signal"],
}


# policy text generation --------------------------------------------------------


def type_set_text(rnd, types, attrs, target=False):
    names = types + attrs
    choice = rnd.randint(0, 9)
    if choice == 0:
        return "*"
    if choice == 1 and target:
        return "self"
    if choice <= 5:
        return rnd.choice(names)
    pos = [rnd.choice(names) for _ in range(rnd.randint(1, 3))]
    neg = [rnd.choice(names) for _ in range(rnd.randint(0, 2))]
    return "{ " + " ".join(pos + ["-" + n for n in neg]) + " }"


def perms_text(rnd, cls):
    if rnd.randint(0, 12) == 0:
        return "*"
    perms = rnd.sample(CLASSES[cls], rnd.randint(1, min(4, len(CLASSES[cls]))))
    if len(perms) == 1 and rnd.random() < 0.5:
        return perms[0]
    return "{ " + " ".join(perms) + " }"


@st.composite
def policy_text(draw, max_types=30, max_attrs=10, max_rules=200, with_extras=True):
    # sizes shrink through hypothesis; content comes from a drawn seed
    n_types = draw(st.integers(1, max_types))
    n_attrs = draw(st.integers(0, max_attrs))
    n_rules = draw(st.integers(0, max_rules))
    rnd = random.Random(draw(st.integers(0, 2**32 - 1)))
    types = [f"t{i}" for i in range(n_types)]
    attrs = [f"a{i}" for i in range(n_attrs)]
    lines = []
    for cls, perms in CLASSES.items():
        lines.append(f"class {cls} {{ {' '.join(perms)} }};")
    if with_extras:
        lines.append("sid kernel u:r:kernel:s0;")
        lines.append("sid unlabeled;")
    lines += [f"attribute {a};" for a in attrs]
    for t in types:
        mine = rnd.sample(attrs, rnd.randint(0, min(3, n_attrs)))
        lines.append(f"type {t}" + "".join(f", {a}" for a in mine) + ";")
    if attrs and rnd.random() < 0.5:
        lines.append(f"typeattribute {rnd.choice(types)} {rnd.choice(attrs)};")
    kinds = (["allow", "allow", "allow", "neverallow", "type_transition", "genfscon"]
             if with_extras else ["allow", "allow", "neverallow"])
    for _ in range(n_rules):
        kind = rnd.choice(kinds)
        if kind in ("allow", "neverallow"):
            cls = rnd.choice(sorted(CLASSES))
            src = type_set_text(rnd, types, attrs)
            tgt = type_set_text(rnd, types, attrs, target=True)
            lines.append(f"{kind} {src} {tgt}:{cls} {perms_text(rnd, cls)};")
        elif kind == "type_transition":
            s, o = rnd.choice(types + attrs), rnd.choice(types + attrs)
            cls = rnd.choice(["process", "file", "dir"])
            lines.append(f"type_transition {s} {o}:{cls} {rnd.choice(types)};")
        else:
            parts = [rnd.choice(["sys", "kernel", "debug", "x"]) for _ in range(rnd.randint(0, 3))]
            lines.append(f"genfscon proc /{'/'.join(parts)} u:object_r:{rnd.choice(types)}:s0;")
    return "\n".join(lines) + "\n"


# oracles ------------------------------------------------------------------------


def membership(policy):
    """Attribute -> member types, rebuilt from the per-type attribute lists."""
    out = {a: set() for a in policy.attributes}
    for t in policy.types.values():
        for a in t.attributes:
            out[a].add(t.name)
    return out


def oracle_resolve(policy, expr, self_type=None):
    members = membership(policy)

    def names(n):
        if n in members:
            return set(members[n])
        return {n}

    if expr.kind == "all":
        return set(policy.types)
    if expr.kind == "self":
        return {self_type}
    result = set()
    for n in expr.positives:
        result |= names(n)
    for n in expr.negatives:
        result -= names(n)
    return result


def oracle_perms(policy, av):
    if not av.all_perms:
        return set(av.perms)
    universe = set(policy.permissions.get(av.cls, ())) | {"*"}
    for r in policy.allows + policy.neverallows:
        if r.av.cls == av.cls:
            universe |= r.av.perms
    return universe


def oracle_quads(policy, rule):
    quads = set()
    perms = oracle_perms(policy, rule.av)
    for s in oracle_resolve(policy, rule.source):
        targets = {s} if rule.target.kind == "self" else oracle_resolve(policy, rule.target)
        for t in targets:
            for p in perms:
                quads.add((s, t, rule.av.cls, p))
    return quads


def oracle_neverallow_pairs(policy):
    """(neverallow index, allow index) -> concrete quadruples in conflict."""
    out = {}
    allow_quads = [oracle_quads(policy, a) for a in policy.allows]
    for i, n in enumerate(policy.neverallows):
        nq = oracle_quads(policy, n)
        for j, aq in enumerate(allow_quads):
            common = nq & aq
            if common:
                out[(i, j)] = common
    return out


def assert_neverallows_match_oracle(policy):
    """Violating (neverallow, allow) pairs, keyed by source line, must match brute force."""
    expected = {
        (policy.neverallows[i].origin.line, policy.allows[j].origin.line): quads
        for (i, j), quads in oracle_neverallow_pairs(policy).items()
    }
    got = check_neverallows(policy)
    assert [(v.neverallow.origin.line, v.allow.origin.line) for v in got] == sorted(expected)
    for v in got:
        quads = expected[(v.neverallow.origin.line, v.allow.origin.line)]
        for p in v.witness_perms:
            assert (v.witness_source, v.witness_target, v.witness_class, p) in quads
        assert v.witness_perms == {p for s, t, c, p in quads
                                   if (s, t) == (v.witness_source, v.witness_target)}


def oracle_vestigial(policy):
    """Indices of allow rules granting file execute with no functional pair."""
    members = membership(policy)

    def expand_name(n):
        return set(members[n]) if n in members else {n}

    trans = set()
    for tr in policy.transitions:
        if tr.cls == "process":
            for s in expand_name(tr.subject):
                for o in expand_name(tr.object_type):
                    trans.add((s, o))
    no_trans = set()
    for r in policy.allows:
        if r.av.cls == "file" and (r.av.all_perms or "execute_no_trans" in r.av.perms):
            for s, t, _, _ in oracle_quads(policy, r):
                no_trans.add((s, t))
    flagged = []
    for i, r in enumerate(policy.allows):
        if r.av.cls != "file" or not (r.av.all_perms or "execute" in r.av.perms):
            continue
        pairs = {(s, t) for s, t, _, _ in oracle_quads(policy, r)}
        if pairs and not any(p in trans or p in no_trans for p in pairs):
            flagged.append(i)
    return flagged


def oracle_grant_table(policy):
    """(source, target, class) -> union of granted permissions."""
    table = {}
    for r in policy.allows:
        for s, t, c, p in oracle_quads(policy, r):
            table.setdefault((s, t, c), set()).add(p)
    return table


def oracle_mac(table, domain, ttype, cls, needed):
    granted = table.get((domain, ttype, cls), set())
    return "*" in granted or set(needed) <= granted


def oracle_dac(snapshot, user, entry, kind):
    if user == "root":
        return True
    mode = entry.mode
    bits = 0
    for i, ch in enumerate(mode[1:]):
        if ch in "rwxst":
            bits |= 1 << (8 - i)
    groups = snapshot.user_groups.get(user, {user})
    if user == entry.owner:
        shift = 6
    elif entry.group in groups:
        shift = 3
    else:
        shift = 0
    want = {"read": 4, "write": 2, "execute": 1}[kind]
    return bool((bits >> shift) & want)


_CLASS_OF = {"-": "file", "d": "dir", "c": "chr_file", "b": "blk_file",
             "s": "sock_file", "p": "fifo_file", "l": "lnk_file"}
_NEEDED = {"read": {"read", "open"}, "write": {"write", "open"}, "execute": {"execute"}}


def oracle_can_access(table, snapshot, proc, path, kind):
    parts = path.strip("/").split("/") if path != "/" else []
    dirs = ["/"] + ["/" + "/".join(parts[:i]) for i in range(1, len(parts))] if parts else []
    for d in dirs:
        e = snapshot.files[d]
        if not oracle_dac(snapshot, proc.user, e, "execute"):
            return False
        if not oracle_mac(table, proc.context.type, e.context.type, "dir", {"search"}):
            return False
    e = snapshot.files[path]
    if not oracle_dac(snapshot, proc.user, e, kind):
        return False
    return oracle_mac(table, proc.context.type, e.context.type, _CLASS_OF[e.mode[0]], _NEEDED[kind])


# snapshot generation ---------------------------------------------------------------

MODE_CHARS = st.tuples(*[st.sampled_from(c) for c in
                         ("r-", "w-", "xsS-", "r-", "w-", "xsS-", "r-", "w-", "xtT-")])


@st.composite
def snapshot_and_policy(draw, max_files=50, max_procs=10):
    labels = ["t0", "t1", "t2", "t3", "t4"]
    domains = ["d0", "d1", "d2"]
    users = ["root", "u0_a1", "u0_a2", "system"]
    lines = ["class file { read write open execute getattr };",
             "class dir { read write open search };",
             "class chr_file { read write open };",
             "class lnk_file { read };"]
    lines += [f"type {t};" for t in labels + domains]
    for _ in range(draw(st.integers(0, 25))):
        cls = draw(st.sampled_from(["file", "dir", "chr_file", "lnk_file"]))
        src = draw(st.sampled_from(domains))
        tgt = draw(st.sampled_from(labels + ["self"]))
        perms = draw(st.lists(st.sampled_from(
            {"file": ["read", "write", "open", "execute"], "dir": ["search", "read", "open"],
             "chr_file": ["read", "write", "open"], "lnk_file": ["read"]}[cls]), min_size=1, unique=True))
        if draw(st.integers(0, 15)) == 0:
            lines.append(f"allow {src} {tgt}:{cls} *;")
        else:
            lines.append(f"allow {src} {tgt}:{cls} {{ {' '.join(perms)} }};")
    policy = parse_policy("\n".join(lines))

    files = {}

    def entry(path, kind):
        mode = kind + "".join(draw(MODE_CHARS))
        label = draw(st.sampled_from(labels))
        owner = draw(st.sampled_from(users))
        group = draw(st.sampled_from(users))
        return FileEntry(path, SecurityContext("u", "object_r", label, "s0"), mode, owner, group)

    files["/"] = entry("/", "d")
    dirs = ["/"]
    n_files = draw(st.integers(1, max_files))
    for i in range(n_files - 1):
        parent = draw(st.sampled_from(dirs))
        kind = draw(st.sampled_from("d-d-clp"))
        path = (parent.rstrip("/") + f"/n{i}")
        files[path] = entry(path, kind)
        if kind == "d":
            dirs.append(path)
    procs = []
    for pid in range(1, draw(st.integers(0, max_procs)) + 1):
        ctx = SecurityContext("u", "r", draw(st.sampled_from(domains)), "s0")
        procs.append(ProcessEntry(ctx, draw(st.sampled_from(users)), pid * 7, 1, f"p{pid % 3}"))
    groups = {}
    if draw(st.booleans()):
        groups = {"u0_a1": frozenset({"u0_a1", "system"})}
    for path in files:
        assert all(a in files for a in ancestors(path))
    return policy, Snapshot(tuple(procs), files, groups)


# scale fixture ----------------------------------------------------------------------

SCALE_FILE_PERMS = ["read", "write", "open", "getattr", "execute", "execute_no_trans", "append", "ioctl", "create"]


def scaled_policy_text(n_types, n_allows, seed=0):
    """Android-shaped policy: domains, file types, attributes, allow-heavy."""
    rnd = random.Random(seed)
    n_domains = n_types // 7
    domains = [f"dom{i}" for i in range(n_domains)] + ["untrusted_app", "system_app", "platform_app"]
    files = [f"file{i}" for i in range(n_types - len(domains) - 5)]
    files += ["unlabeled", "default_prop", "proc_security", "tee_exec", "system_data_file"]
    attrs = ["domain", "appdomain", "file_type"] + [f"attr{i}" for i in range(40)]
    lines = ["class file { %s };" % " ".join(SCALE_FILE_PERMS), "class dir { read search open getattr };",
             "class process { transition fork signal };", "class property_service { set };"]
    lines += [f"attribute {a};" for a in attrs]
    for d in domains:
        extra = rnd.sample(attrs[3:], 2)
        app = ", appdomain" if d.endswith("_app") or rnd.random() < 0.1 else ""
        lines.append(f"type {d}, domain{app}, {', '.join(extra)};")
    for f in files:
        lines.append(f"type {f}, file_type, {rnd.choice(attrs[3:])};")
    for _ in range(n_allows):
        src = rnd.choice(domains) if rnd.random() < 0.8 else rnd.choice(attrs[:2] + attrs[3:])
        r = rnd.random()
        if r < 0.7:
            tgt = rnd.choice(files)
        elif r < 0.85:
            tgt = rnd.choice(attrs)
        elif r < 0.95:
            tgt = "{ %s -%s }" % (rnd.choice(attrs), rnd.choice(files))
        else:
            tgt = "self"
        cls = rnd.choice(["file", "file", "file", "dir", "process"])
        perms = {"file": SCALE_FILE_PERMS, "dir": ["read", "search", "open", "getattr"],
                 "process": ["transition", "fork", "signal"]}[cls]
        lines.append(f"allow {src} {tgt}:{cls} {{ {' '.join(rnd.sample(perms, rnd.randint(1, 3)))} }};")
    for _ in range(n_domains // 2):
        lines.append(f"type_transition {rnd.choice(domains)} {rnd.choice(files)}:process {rnd.choice(domains)};")
    lines.append("neverallow { domain -dom0 } proc_security:file { write append };")
    return "\n".join(lines) + "\n"
