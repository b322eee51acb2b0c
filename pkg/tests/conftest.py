import numpy as np
import pytest

from hinfswitch import load_example, make_model, solve_all, synthesize
from hinfswitch.model import Dims


@pytest.fixture(scope="session")
def example():
    return load_example()


@pytest.fixture(scope="session")
def example_solution(example):
    return solve_all(example)


@pytest.fixture(scope="session")
def example_gains(example, example_solution):
    return synthesize(example_solution, example)


def scalar_model(gamma=1.0, T=1.0, xi=1.0, D=1, generator=None, **fields):
    """Scalar model with every coefficient given by keyword (default zero)."""
    base = dict(A=0.0, B1=0.0, B2=0.0, C=0.0, D1=0.0, D2=0.0, Cbar=0.0, D1bar=0.0,
                D2bar=0.0, Q=0.0, R1=1.0, R2=1.0, S1=0.0, S2=0.0, G=0.0)
    base.update(fields)
    gen = np.array([[0.0]]) if generator is None else generator
    return make_model(Dims(1, 1, 1, D, T), gen, [dict(base) for _ in range(D)], gamma, [xi])


@pytest.fixture
def scalar():
    return scalar_model


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
