import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def separated(rng, shape, gap=0.1):
    """Distinct values at least ``gap`` apart, away from zero (no ties or kinks under FD)."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap
    return rng.permutation(vals).reshape(shape)


@pytest.fixture
def separated_values():
    return separated
