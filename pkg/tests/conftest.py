from pathlib import Path

import pytest

from sepolyzer.device import build_snapshot, ingest_groups, ingest_ls, ingest_ps
from sepolyzer.parser import parse_policy

DATA = Path(__file__).parent / "data"

_acceptance_results = []


@pytest.fixture(scope="session")
def baseline_text():
    return (DATA / "aosp_baseline.te").read_text()


@pytest.fixture
def baseline(baseline_text):
    return parse_policy(baseline_text, "aosp_baseline.te")


@pytest.fixture
def with_rules(baseline_text):
    """Baseline text plus extra statements, parsed as a separate policy."""

    def build(*rules):
        return parse_policy(baseline_text + "\n".join(rules) + "\n", "subject.te")

    return build


@pytest.fixture(scope="session")
def device_snapshot():
    return build_snapshot(
        ingest_ps((DATA / "device_ps.txt").read_text()),
        ingest_ls((DATA / "device_ls.txt").read_text()),
        ingest_groups((DATA / "device_groups.txt").read_text()),
    )


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_runtest_logreport(report):
    criterion = dict(report.user_properties).get("criterion")
    if criterion is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _acceptance_results.append((criterion, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    verdicts = {}
    for criterion, outcome in _acceptance_results:
        verdicts[criterion] = verdicts.get(criterion, True) and outcome == "passed"
    terminalreporter.section("acceptance criteria")
    for criterion, ok in verdicts.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion}")
