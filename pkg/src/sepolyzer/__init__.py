"""Analysis toolkit for SEAndroid Type Enforcement policies."""

from .assertions import NeverallowViolation, check_neverallows
from .device import (
    FileEntry,
    ProcessEntry,
    Snapshot,
    can_access,
    dac_allows,
    ingest_ls,
    ingest_ps,
    mac_allows,
    query_files,
    query_processes,
    refine_findings,
)
from .lint import Finding, LintConfig, run_lint
from .model import (
    AccessVector,
    AllowRule,
    NeverallowRule,
    Policy,
    SecurityContext,
    TypeSetExpr,
    TypeTransitionRule,
    av_matches,
    resolve_type_set,
)
from .parser import ParseError, PolicySyntaxError, parse_policy, serialize_policy
from .stats import (
    PolicyDiff,
    PolicyStats,
    complexity_ratios,
    compute_stats,
    diff_policies,
    export_attribute_graph,
    stats_delta,
)

__version__ = "0.1.0"
