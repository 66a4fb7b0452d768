import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ecot.core import TestingProblem

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_problem(rng, n0=6, n1=3, m=4, d=2, shift=2.0):
    x0 = rng.standard_normal((n0, d))
    x1 = rng.standard_normal((n1, d)) + shift
    xu = rng.standard_normal((m, d))
    return TestingProblem(x0, x1, xu)


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def small_problem(rng):
    return make_problem(rng)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
