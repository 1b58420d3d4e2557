import numpy as np
import pytest

from impulsive_moments import (BoundaryCondition, ImpulsiveOCP, Polynomial,
                               SemialgebraicSet)
from impulsive_moments.cli import load_problem


def unit_interval_problem(tv_bound=None, x0=1.0, xT=0.5, T=2.0):
    """min int x^2 dt, dx = dw, x^2 <= 1, built without the problem-file parser."""
    x = Polynomial.variable(2, 1)
    one = Polynomial.constant(2, 1.0)
    return ImpulsiveOCP(
        n_states=1, m_controls=1, T=T,
        f=(Polynomial.zero(2),), G=((one,),),
        h=x * x, H=(Polynomial.zero(2),), h_T=Polynomial.zero(2),
        X=SemialgebraicSet(2, (one - x * x,)),
        initial=BoundaryCondition.dirac([x0]),
        terminal=BoundaryCondition.dirac([xT]),
        tv_bound=tv_bound, name="unit",
    )


@pytest.fixture
def ex1():
    return unit_interval_problem()


@pytest.fixture
def ex2():
    return unit_interval_problem(tv_bound=1.0)


@pytest.fixture(scope="session")
def bundled():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = load_problem(name)
        return cache[name]
    return get


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
