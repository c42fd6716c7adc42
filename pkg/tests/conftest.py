"""Per-criterion verdict lines for the acceptance suite."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "scenario (a) bias of mo, dr, np within 25% of SD",
    2: "dr/np unbiased in (b),(c); mo biased in (b),(d)",
    3: "CI coverage of dr and np",
    4: "identification with true nuisances matches truth",
    5: "structural identities",
    6: "sensitivity reduction, dependence and bias correction",
    7: "numerical kernels and generator fidelity",
    8: "replay determinism across thread counts",
}

_outcomes: dict[int, list[str]] = {}
_details: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test checks")


@pytest.fixture
def detail(request):
    """Callable recording a one-line measurement for the test's criterion."""
    marker = request.node.get_closest_marker("criterion")
    n = marker.args[0] if marker else 0
    return lambda text: _details.setdefault(n, []).append(text)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _outcomes.setdefault(n, []).append("fail" if call.excinfo is not None else "pass")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, text in CRITERIA.items():
        runs = _outcomes.get(n)
        if not runs:
            verdict = "NOT RUN"
        else:
            verdict = "PASS" if all(r == "pass" for r in runs) else "FAIL"
        tr.write_line(f"criterion {n}: {verdict:7s} {text}")
        for d in _details.get(n, []):
            tr.write_line(f"    {d}")
