import numpy as np
import pytest

from smcluster.models import LikelihoodCache, NigGaussianModel, UnitModel


def unit_scorer(n):
    return LikelihoodCache.for_payloads(UnitModel(), [None] * n)


def nig_scorer(points, mu0=0.0, lam=1.0, a=1.0, b=1.0):
    return LikelihoodCache.for_payloads(NigGaussianModel(mu0, lam, a, b), np.asarray(points, dtype=float))


def two_groups(n_per=4, gap=40.0, seed=0, spread=0.3):
    """Two tight 1-D groups far apart; ids alternate between groups."""
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, spread, n_per)
    b = rng.normal(gap, spread, n_per)
    pts = np.empty(2 * n_per)
    pts[0::2], pts[1::2] = a, b
    return pts


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
