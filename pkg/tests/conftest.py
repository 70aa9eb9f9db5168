import numpy as np
import pytest

from wavectl.control import ControlProblem
from wavectl.propagator import unit_box_map
from wavectl.scenario import load_scenario

ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    """Record one acceptance line; printed in the terminal summary."""
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def box24():
    return unit_box_map(24)


@pytest.fixture(scope="session")
def box16():
    return unit_box_map(16)


@pytest.fixture(scope="session")
def fig4a():
    return load_scenario("fig4a")


@pytest.fixture(scope="session")
def fig4a_map(fig4a):
    return fig4a.zone_map()


@pytest.fixture(scope="session")
def fig4a_problem(fig4a, fig4a_map):
    return ControlProblem(fig4a_map, fig4a.region, fig4a.solver, fig4a.control.filter_fraction)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
