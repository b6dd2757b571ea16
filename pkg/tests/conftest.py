import numpy as np
import pytest
from hypothesis import settings

from aoi.discretize import FixedEffectGrid
from aoi.estimator import LikelihoodKernel

settings.register_profile('default', deadline=None, max_examples=40, derandomize=True)
settings.load_profile('default')


def random_kernel(rng: np.random.Generator, n_Y: int, K: int, equal_mass: bool = True):
    """Column-stochastic ``(n_Y, K)`` kernel with a random grid of masses."""
    F = rng.dirichlet(np.full(n_Y, 0.7), size=K).T
    if equal_mass:
        masses = np.full(K, 1.0 / K)
    else:
        masses = rng.dirichlet(np.ones(K))
        masses = np.maximum(masses, 1e-3)
        masses /= masses.sum()
    grid = FixedEffectGrid(np.arange(K, dtype=float), masses)
    return LikelihoodKernel(F, None, None, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


GATE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section('acceptance gate')
        for line in GATE_LINES:
            terminalreporter.write_line(line)
