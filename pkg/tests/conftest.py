import math

import numpy as np
import pytest
from hypothesis import settings

from nelsonlab import meanfield as mf
from nelsonlab.kernels import make_kernels
from nelsonlab.spectral import make_grid

settings.register_profile("nelsonlab", max_examples=25, deadline=None)
settings.load_profile("nelsonlab")


@pytest.fixture(scope="session")
def grid1():
    return make_grid(1, 8 * math.pi, 64)


@pytest.fixture(scope="session")
def ks1(grid1):
    return make_kernels(grid1)


@pytest.fixture(scope="session")
def state1(grid1):
    return mf.gaussian_state(grid1, alpha_amp=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
