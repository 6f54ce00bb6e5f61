import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_prob_matrix(num_classes, n, rng, floor=1e-3):
    """Random column-stochastic matrix with entries bounded away from zero."""
    mat = rng.random((num_classes, n)) + floor
    return mat / mat.sum(axis=0)


def random_balanced_marginals(num_rows, num_cols, rng):
    r = rng.random(num_rows) + 0.1
    c = rng.random(num_cols) + 0.1
    return r / r.sum(), c / c.sum()
