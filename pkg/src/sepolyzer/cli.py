"""sepolyzer command line.

Exit status: 0 clean, 1 findings at or above --fail-on (or neverallow
violations), 2 input or parse error, 3 usage error.  With --json the report
is a single JSON document on stdout and any human text goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

from . import assertions, device, lint, stats
from .parser import PolicySyntaxError, parse_policy_file

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_INPUT = 2
EXIT_USAGE = 3

CONFIG_ENV = "SEPOLYZER_CONFIG"


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_policy(path: str):
    try:
        return parse_policy_file(path)
    except PolicySyntaxError as exc:
        raise InputError(str(exc)) from None
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def _load_snapshot(path: str):
    try:
        return device.snapshot_from_json(_read(path))
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: invalid snapshot: {exc}") from None


def _emit(args, doc, text: str):
    if args.json:
        json.dump(doc, sys.stdout, indent=2, sort_keys=False)
        sys.stdout.write("\n")
    else:
        sys.stdout.write(text)


def _fmt_ratio(value) -> str:
    return "undefined" if value is None else f"{value:.2f}"


# subcommands -------------------------------------------------------------


def cmd_stats(args) -> int:
    policy = _load_policy(args.policy)
    st = stats.compute_stats(policy)
    ratios = stats.complexity_ratios(st)
    doc = dict(st.as_dict())
    doc.update(ratios.as_dict())
    doc["expanded_allow_triples"] = stats.expanded_allow_count(policy)
    lines = [f"{k:28} {v}" for k, v in st.as_dict().items()]
    lines.append(f"{'expanded_allow_triples':28} {doc['expanded_allow_triples']}")
    for k, v in ratios.as_dict().items():
        lines.append(f"{k:28} {_fmt_ratio(v)}")
    lines.append("note: untrusted_app_rule_count includes rules granted through attributes")
    if args.baseline:
        base = stats.compute_stats(_load_policy(args.baseline))
        delta = stats.stats_delta(base, st)
        doc = {"stats": doc, "baseline": base.as_dict(), "delta": delta.as_dict()}
        lines.append("")
        lines.append("delta against baseline:")
        lines += [f"{k:28} {v:+d}" for k, v in delta.as_dict().items()]
    _emit(args, doc, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_diff(args) -> int:
    baseline = _load_policy(args.baseline)
    subject = _load_policy(args.subject)
    try:
        diff = stats.diff_policies(baseline, subject, args.type)
    except stats.FilterUnknownType as exc:
        raise UsageError(str(exc)) from None
    if diff.is_empty():
        text = "no differences\n"
    else:
        lines = []
        for cat in stats.PolicyDiff.CATEGORIES:
            for sign, prefix in (("+", "added_"), ("-", "removed_")):
                items = getattr(diff, prefix + cat)
                if not items:
                    continue
                lines.append(f"{prefix}{cat} ({len(items)}):")
                rendered = sorted(items) if isinstance(items, set) else [str(r) for r in items]
                lines += [f"  {sign} {item}" for item in rendered]
        text = "\n".join(lines) + "\n"
    _emit(args, diff.as_dict(), text)
    return EXIT_OK


def cmd_check_neverallow(args) -> int:
    policy = _load_policy(args.policy)
    extra = _load_policy(args.neverallows).neverallows if args.neverallows else ()
    violations = assertions.check_neverallows(policy, extra, all_witnesses=args.verbose)
    lines = []
    for v in violations:
        lines.append(f"{v.allow.origin}: {v.allow}")
        lines.append(f"    violates {v.neverallow.origin}: {v.neverallow}")
        lines.append(f"    witness: {v.witness_source} {v.witness_target}:{v.witness_class} "
                     f"{{ {' '.join(sorted(v.witness_perms))} }}")
    lines.append(f"{len(violations)} violation(s)")
    _emit(args, {"violations": [v.as_dict() for v in violations]}, "\n".join(lines) + "\n")
    return EXIT_FINDINGS if violations else EXIT_OK


def _lint_config(path: Optional[str]) -> lint.LintConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return lint.LintConfig()
    try:
        return lint.LintConfig.from_text(_read(path))
    except lint.LintConfigError as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_lint(args) -> int:
    config = _lint_config(args.config)
    policy = _load_policy(args.policy)
    baseline = _load_policy(args.baseline) if args.baseline else None
    snapshot = _load_snapshot(args.snapshot) if args.snapshot else None
    findings = lint.run_lint(policy, baseline, snapshot, config)
    lines = []
    for det in sorted({f.detector for f in findings}):
        group = [f for f in findings if f.detector == det]
        lines.append(f"{det} ({len(group)}):")
        lines += [f"  {f}".replace("\n", "\n  ") for f in group]
    lines.append(f"{len(findings)} finding(s)")
    doc = {
        "findings": [f.as_dict() for f in findings],
        "default_type_usage": lint.default_type_usage(policy, config),
    }
    _emit(args, doc, "\n".join(lines) + "\n")
    failing = any(lint.severity_at_least(f.severity, args.fail_on) for f in findings)
    return EXIT_FINDINGS if failing else EXIT_OK


def cmd_query(args) -> int:
    policy = _load_policy(args.policy)
    snapshot = _load_snapshot(args.snapshot)
    lines: List[str] = []

    def trace_summary(proc, path):
        result = device.can_access(policy, snapshot, proc, path, args.access)
        return f"{len(result.trace)} checks passed"

    if args.file is not None:
        if args.file not in snapshot.files:
            raise UsageError(f"{args.file} is not in the snapshot")
        procs = device.query_processes(policy, snapshot, args.file, args.access)
        results = []
        for p in procs:
            entry = p.as_dict()
            line = f"{p.pid} {p.user} {p.context} {p.name}"
            if args.verbose:
                entry["trace"] = trace_summary(p, args.file)
                line += f"  ({entry['trace']})"
            results.append(entry)
            lines.append(line)
        doc = {"file": args.file, "access": args.access, "processes": results}
    else:
        if args.pid is not None:
            proc = snapshot.find_pid(args.pid)
            selected = [proc] if proc else []
        else:
            selected = snapshot.find_processes(args.process)
        if not selected:
            raise UsageError("no process matches the selector")
        groups = []
        for proc in selected:
            paths = device.query_files(policy, snapshot, proc, args.access)
            lines.append(f"pid {proc.pid} ({proc.name}, {proc.context}, user {proc.user}):")
            files = []
            for path in paths:
                entry = {"path": path}
                line = f"  {path}"
                if args.verbose:
                    entry["trace"] = trace_summary(proc, path)
                    line += f"  ({entry['trace']})"
                files.append(entry)
                lines.append(line)
            groups.append({"process": proc.as_dict(), "files": files})
        doc = {"access": args.access, "results": groups}
    _emit(args, doc, "\n".join(lines) + ("\n" if lines else ""))
    return EXIT_OK


def cmd_ingest(args) -> int:
    def ingest(parse, path):
        try:
            return parse(_read(path))
        except device.IngestError as exc:
            raise InputError(f"{path}: {exc}") from None

    processes = ingest(device.ingest_ps, args.ps)
    files = ingest(device.ingest_ls, args.ls) if args.ls else {}
    groups = ingest(device.ingest_groups, args.groups) if args.groups else {}
    try:
        snapshot = device.build_snapshot(processes, files, groups)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(device.snapshot_to_json(snapshot))
    print(f"wrote {args.output}: {len(snapshot.processes)} processes, {len(snapshot.files)} files",
          file=sys.stderr)
    return EXIT_OK


def cmd_graph(args) -> int:
    dot = stats.export_attribute_graph(_load_policy(args.policy))
    if args.output and args.output != "-":
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dot)
    else:
        sys.stdout.write(dot)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _ArgumentParser(prog="sepolyzer", description="SEAndroid policy analysis")
    sub = p.add_subparsers(dest="command", parser_class=_ArgumentParser)
    sub.required = True

    s = sub.add_parser("stats", help="policy complexity metrics")
    s.add_argument("policy")
    s.add_argument("--baseline")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("diff", help="compare a policy against a baseline")
    s.add_argument("baseline")
    s.add_argument("subject")
    s.add_argument("--type", help="keep only entries involving this type")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_diff)

    s = sub.add_parser("check-neverallow", help="find allow rules violating neverallow assertions")
    s.add_argument("policy")
    s.add_argument("--neverallows", help="extra policy text with neverallow statements")
    s.add_argument("--verbose", action="store_true", help="list every witness pair")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_check_neverallow)

    s = sub.add_parser("lint", help="heuristic misconfiguration checks")
    s.add_argument("policy")
    s.add_argument("--baseline")
    s.add_argument("--snapshot")
    s.add_argument("--config", help=f"key=value config file (default: ${CONFIG_ENV})")
    s.add_argument("--fail-on", choices=lint.SEVERITIES, default="error")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_lint)

    s = sub.add_parser("query", help="who can access what on a recorded device")
    s.add_argument("--policy", required=True)
    s.add_argument("--snapshot", required=True)
    sel = s.add_mutually_exclusive_group(required=True)
    sel.add_argument("--process", help="process name")
    sel.add_argument("--pid", type=int)
    sel.add_argument("--file", help="absolute path")
    s.add_argument("--access", choices=device.ACCESS_KINDS, required=True)
    s.add_argument("--verbose", action="store_true")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("ingest", help="build a snapshot from recorded ps/ls output")
    s.add_argument("--ps", required=True)
    s.add_argument("--ls")
    s.add_argument("--groups")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("graph", help="DOT graph of attribute memberships")
    s.add_argument("policy")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_graph)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except InputError as exc:
        print(f"sepolyzer: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except UsageError as exc:
        print(f"sepolyzer: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
