import pytest

from planar_tof import generate_experiment

_results = {}


@pytest.fixture(scope="session")
def forward_frames():
    """The default 550-frame forward-facing dataset, seed 0."""
    return generate_experiment("forward_facing", seed=0)


@pytest.fixture(scope="session")
def small_forward_frames():
    """A reduced forward-facing dataset for quick protocol tests."""
    return generate_experiment(
        "forward_facing",
        params={"surfaces": ["paper", "solid_carpet"], "objects": ["wall", "glove"],
                "n_planar": 8, "n_per_object": 4},
        seed=3)


@pytest.fixture
def record_criterion():
    """Record a PASS/FAIL line for an acceptance criterion."""
    def record(number, passed, detail):
        _results[number] = {"passed": bool(passed), "detail": detail}
    return record


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        r = _results[number]
        status = "PASS" if r["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {r['detail']}")
