import numpy as np
import pytest

from conftest import make_identity_data
from qifcombine.errors import InsufficientDataError
from qifcombine.source import SourceData, qif_objective


class TestQifObjective:
    def test_zero_score_gives_zero_q(self):
        # Outcomes equal to the linear predictor exactly: every psi_i is zero.
        X = np.ones((5, 2, 1))
        y = X[:, :, 0] * 2.0
        data = SourceData(y=y, X=X, link="identity", basis="independence",
                          dispersion=1.0)
        q, C = qif_objective(data, np.array([2.0]))
        assert q == 0.0
        assert np.allclose(C, 0.0)

    def test_scalar_hand_computation(self):
        # p=1, s=1 on three one-row participants with unit dispersion:
        # psi_i = x_i(y_i - x_i t), Q = 3 * mean(psi)^2 / mean(psi^2).
        xs = [2.0, -1.0, 0.5]
        ys = [1.0, 2.0, -3.0]
        t = 0.4
        psis = [x * (y - x * t) for x, y in zip(xs, ys)]
        expect = 3 * np.mean(psis) ** 2 / np.mean(np.square(psis))
        data = SourceData(
            y=[np.array([y]) for y in ys],
            X=[np.array([[x]]) for x in xs],
            link="identity", basis="independence", dispersion=1.0,
        )
        q, C = qif_objective(data, np.array([t]))
        assert q == pytest.approx(expect, rel=1e-12)
        assert C[0, 0] == pytest.approx(np.mean(np.square(psis)), rel=1e-12)

    def test_reorder_invariance(self, rng):
        data, _ = make_identity_data(rng, n=25, m=3, dispersion=1.0)
        theta = rng.normal(size=3)
        q1, C1 = qif_objective(data, theta)
        perm = rng.permutation(25)
        idx, y, X = data._buckets[0]
        data_p = SourceData(y=y[perm], X=X[perm], link="identity", basis="ar1",
                            dispersion=1.0)
        q2, C2 = qif_objective(data_p, theta)
        assert q1 == pytest.approx(q2, rel=1e-12)
        assert np.allclose(C1, C2, atol=1e-12)

    def test_q_nonnegative_and_c_psd(self, rng):
        for _ in range(5):
            data, _ = make_identity_data(rng, n=40, m=4, dispersion=None)
            theta = rng.normal(size=3)
            q, C = qif_objective(data, theta)
            assert q >= 0.0
            assert np.allclose(C, C.T)
            assert np.linalg.eigvalsh(C).min() > -1e-10

    def test_too_few_participants(self, rng):
        data, _ = make_identity_data(rng, n=5, m=3, basis="ar1")  # p*s = 6 > 5
        with pytest.raises(InsufficientDataError, match="basis|pool"):
            qif_objective(data, np.zeros(3))
