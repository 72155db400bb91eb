import numpy as np
import pytest

from infogamma.model import make_problem


@pytest.fixture(scope="session")
def iso():
    return make_problem("(x1^2 + x2^2)/2", [-1, -1], [1, 1], c=0.1)


@pytest.fixture(scope="session")
def aniso():
    return make_problem("(x1^2 + 3*x2^2)/2", [-1, -1], [1, 1], c=0.1)


@pytest.fixture(scope="session")
def rev():
    return make_problem("(x1^2 + x2^2)/2", [-1, -1], [1, 1])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
