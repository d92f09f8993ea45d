"""Per-criterion bookkeeping for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n)`` report into one PASS/FAIL line per
criterion at the end of the run, with any measurements they recorded.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "commutativity",
    2: "oracle equivalence",
    3: "determinism across thread counts",
    4: "proposer/validator agreement",
    5: "contention independence",
    6: "scaling 8 vs 1 threads",
    7: "many-accounts degradation",
    8: "lock-free stress",
    9: "replay prevention",
    10: "auction and sequencer oracles",
    11: "persistence fidelity",
    12: "conflict-set filtering",
}

_outcomes: dict[int, list[str]] = {}
_notes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def note(request):
    """``note("...")`` attaches a measurement line to the test's criterion."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        if marker is not None:
            _notes.setdefault(marker.args[0], []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(marker.args[0], []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        got = _outcomes.get(n)
        if got is None:
            status = "NOT RUN"
        elif all(o == "passed" for o in got):
            status = "PASS"
        elif any(o == "failed" for o in got):
            status = "FAIL"
        else:
            status = "SKIPPED"
        tr.write_line(f"criterion {n:>2} ({name}): {status}")
        for line in _notes.get(n, []):
            tr.write_line(f"    {line}")
