import numpy as np
import pytest

from geochords.geodesic import PATH_OBSERVERS
from geochords.intersection import self_event_bound, self_intersections

# Every path a solver returns is checked against the self-event bound.
_seen: list = []
BOUND_TALLY = {"checked": 0, "events": 0, "violations": [], "max_ratio": 0.0}
ACCEPTANCE_LINES: dict = {}


def _collect(path):
    _seen.append(path)


PATH_OBSERVERS.append(_collect)


def check_self_event_bound(paths):
    bad = []
    for path in paths:
        rep = self_intersections(path)
        bound = self_event_bound(path)
        BOUND_TALLY["checked"] += 1
        BOUND_TALLY["events"] += len(rep.events)
        BOUND_TALLY["max_ratio"] = max(BOUND_TALLY["max_ratio"], len(rep.events) / bound)
        if len(rep.events) > bound:
            bad.append((path.length, len(rep.events), bound))
    BOUND_TALLY["violations"] += bad
    return bad


@pytest.fixture(autouse=True)
def self_event_bound_guard():
    # paths built by shared fixtures are charged to the first test using them
    yield
    fresh = _seen[:]
    del _seen[:]
    bad = check_self_event_bound(fresh)
    assert not bad, f"self-event count above (L/inj+1)^2 on {bad}"


@pytest.fixture
def record_criterion():
    def record(number, title, ok, detail=""):
        line = f"criterion {number} [{title}]: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
    terminalreporter.section("global self-event bound")
    ok = not BOUND_TALLY["violations"]
    terminalreporter.write_line(
        f"{'PASS' if ok else 'FAIL'}: {BOUND_TALLY['checked']} solver paths checked, "
        f"largest count/bound ratio {BOUND_TALLY['max_ratio']:.3g}"
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
