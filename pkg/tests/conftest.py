from __future__ import annotations

import pytest

from fbmesh.core import CallResult, LatencyModel, Request, Universe
from fbmesh.planner import enumerate_catalog, parse_quality_map
from fbmesh.policy import FailureWindow

# Main 0.62; worst group fallback sits 9.09% below it, the client-side model 58.06% below.
REFERENCE_QUALITY = {
    "A,B,C": 0.62,
    "A,B": 0.60,
    "A,C": 0.59,
    "B,C": 0.58,
    "A": 0.57,
    "B": 0.565,
    "C": 0.563642,
    "": 0.260028,
}


@pytest.fixture
def abc() -> Universe:
    return Universe.parse("A,B,C")


@pytest.fixture
def ref_catalog(abc):
    return enumerate_catalog(abc, parse_quality_map(abc, REFERENCE_QUALITY))


def make_request(rid="r1", amount=50_000, groups="ABC", arrival=0.0, value=0.5) -> Request:
    return Request(rid, amount, {g: {"value": value} for g in groups}, arrival)


def warm_window(size=20, ok=19) -> FailureWindow:
    """A main-model failure window with mostly successful history."""
    return FailureWindow(size, [CallResult.OK] * ok)


def const(ms: float, failure_prob: float = 0.0) -> LatencyModel:
    return LatencyModel("constant", value_ms=ms, failure_prob=failure_prob)


# criterion number -> (title, passed, detail); filled by the acceptance module
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  [{n:2d}] {title}: {detail}")
