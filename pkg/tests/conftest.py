import numpy as np
import pytest

from qifcombine.source import SourceData


def make_identity_data(rng, n=80, m=5, p=3, basis="ar1", theta=None, noise=1.0,
                       dispersion=None):
    X = np.concatenate([np.ones((n, m, 1)), rng.normal(size=(n, m, p - 1))], axis=2)
    theta = np.asarray(theta) if theta is not None else rng.normal(size=p)
    y = X @ theta + noise * rng.normal(size=(n, m))
    return SourceData(y=y, X=X, link="identity", basis=basis, dispersion=dispersion), theta


def make_logit_data(rng, n=200, m=5, p=3, basis="ar1", theta=None):
    X = np.concatenate([np.ones((n, m, 1)), rng.normal(size=(n, m, p - 1))], axis=2)
    theta = np.asarray(theta) if theta is not None else rng.normal(size=p) * 0.7
    mu = 1.0 / (1.0 + np.exp(-(X @ theta)))
    y = (rng.uniform(size=(n, m)) < mu).astype(float)
    return SourceData(y=y, X=X, link="logit", basis=basis), theta


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)
