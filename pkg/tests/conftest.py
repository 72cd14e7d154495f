import numpy as np
import pytest

_CRITERIA = pytest.StashKey[dict]()

from convexflow.envelope import reference_envelope
from convexflow.problems import problem_library
from convexflow.solver import solve


@pytest.fixture(scope="session")
def double_well_run():
    p = problem_library("double_well_1d")
    s = solve(p, 6.0, np.arange(0.0, 6.0 + 1e-9, 0.05))
    env = reference_envelope(s.initial).envelope
    return p, s, env


@pytest.fixture(scope="session")
def radial_run():
    p = problem_library("radial_double_well_2d")
    s = solve(p, 6.0, np.arange(0.0, 6.0 + 1e-9, 0.01))
    env = reference_envelope(s.initial).envelope
    return p, s, env


@pytest.fixture(scope="session")
def asym_run():
    p = problem_library("asymmetric_quartic_1d")
    s = solve(p, 6.0, np.arange(0.0, 6.0 + 1e-9, 0.05))
    env = reference_envelope(s.initial).envelope
    return p, s, env


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, passed, detail)``."""
    table = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        table[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_CRITERIA, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for k in sorted(table):
            terminalreporter.write_line(table[k])
