import numpy as np
import pytest

from biequi.bench import gen_synthetic_pair
from biequi.params import init_params

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def params():
    return init_params(seed=0)


@pytest.fixture(scope="session")
def small_pair():
    return gen_synthetic_pair(7, 1200, 0.6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
