import numpy as np
import pytest
from dataclasses import replace

from conftest import make_identity_data
from qifcombine.combine import (
    CohortSummary,
    IntegrateOptions,
    Partition,
    build_cohort_summary,
    integrate,
    pca_reduce,
    stack_sensitivities,
    assemble_weight,
)
from qifcombine.errors import SingularMatrixError
from qifcombine.source import fit_source


@pytest.fixture
def grid(rng):
    summaries = []
    for k in (1, 2):
        fits = {}
        for j in (1, 2):
            d, _ = make_identity_data(rng, n=150, m=4, theta=np.array([1.0, -0.5, 0.25]))
            fits[j] = fit_source(d)
        summaries.append(build_cohort_summary(k, fits))
    return summaries, Partition.pooled(2, 2)


class TestPcaReduce:
    def test_full_rank_keeps_everything(self, grid):
        summaries, part = grid
        S = stack_sensitivities(summaries, part)
        V = assemble_weight(summaries, part)
        red = pca_reduce(S, V, np.zeros(V.shape[0]), threshold=0.0)
        assert red.rank == V.shape[0]
        assert red.S.shape == (V.shape[0], 3)

    def test_eigenvalues_sorted_and_explained(self, grid):
        summaries, part = grid
        S = stack_sensitivities(summaries, part)
        V = assemble_weight(summaries, part)
        red = pca_reduce(S, V, np.zeros(V.shape[0]))
        assert np.all(np.diff(red.eigenvalues) <= 1e-15)
        assert red.explained[-1] == pytest.approx(1.0, abs=1e-12)
        assert np.all((red.explained >= -1e-12) & (red.explained <= 1 + 1e-12))

    def test_duplicated_moment_row_recovers_original(self, grid):
        # Duplicate one moment coordinate in S, rhs, and V: the weight drops
        # rank by one, and the reduced solution equals the original system's.
        summaries, part = grid
        sys_S = stack_sensitivities(summaries, part)
        V = assemble_weight(summaries, part)
        res_full = integrate(summaries, part)
        # Build the rhs exactly as integrate does.
        order = part.sources()
        by_cohort = {cs.cohort_id: cs for cs in summaries}
        parts = []
        for (j, k) in order:
            f = by_cohort[k].fits[j]
            parts.append(by_cohort[k].n * (f.S_hat @ f.theta_hat))
        rhs = np.concatenate(parts)

        dup = 3
        T = np.vstack([np.eye(sys_S.shape[0]), np.eye(sys_S.shape[0])[dup]])
        S2 = T @ sys_S
        rhs2 = T @ rhs
        V2 = T @ V @ T.T
        red = pca_reduce(S2, V2, rhs2)
        assert red.rank == sys_S.shape[0]
        A = red.S.T @ (red.S / red.eigenvalues[:, None])
        c = red.S.T @ (red.rhs / red.eigenvalues)
        theta = np.linalg.solve(A, c)
        assert np.max(np.abs(theta - res_full.theta)) < 1e-6

    def test_under_identified_error(self):
        S = np.ones((3, 2))
        V = np.outer(np.ones(3), np.ones(3))  # rank 1 < 2 parameters
        with pytest.raises(SingularMatrixError, match="under-identified"):
            pca_reduce(S, V, np.zeros(3))


class TestIntegrateWithPca:
    def test_full_rank_unchanged(self, grid):
        summaries, part = grid
        plain = integrate(summaries, part)
        pca = integrate(summaries, part, IntegrateOptions(pca=True, pca_threshold=0.0))
        assert np.max(np.abs(plain.theta - pca.theta)) < 1e-10
        assert np.max(np.abs(plain.covariance - pca.covariance)) < 1e-10
        assert pca.pca_rank == sum(cs.V.shape[0] for cs in summaries)

    def test_rank_deficient_summary_detected_and_reduced(self, grid):
        # Duplicate a moment row inside one cohort's payload (as an
        # equicorrelated working structure can produce): plain integration
        # refuses, the reduction path completes and matches the clean system.
        summaries, part = grid
        clean = integrate(summaries, part)
        cs = summaries[0]
        f = cs.fits[1]
        S2 = np.vstack([f.S_hat, f.S_hat[-1]])
        d = cs.V.shape[0]
        T = np.vstack([np.eye(d), np.eye(d)[f.S_hat.shape[0] - 1]])
        # reorder duplicate into block 1's span: duplicate row index within block 1
        V2 = T @ cs.V @ T.T
        # block order (1, 2): block 1 rows grow by one; rebuild block-consistent V
        fits2 = dict(cs.fits)
        fits2[1] = replace(f, S_hat=S2)
        # Row order of V must follow block order; T put the duplicate at the
        # end, so permute it back next to block 1.
        perm = list(range(d + 1))
        dup_row = perm.pop(-1)
        perm.insert(f.S_hat.shape[0], dup_row)
        P = np.eye(d + 1)[perm]
        V2 = P @ V2 @ P.T
        doctored = CohortSummary(cohort_id=cs.cohort_id, n=cs.n, fits=fits2,
                                 V=V2, block_order=cs.block_order)
        with pytest.raises(SingularMatrixError, match="PCA|pca"):
            integrate([doctored, summaries[1]], part)
        res = integrate([doctored, summaries[1]], part,
                        IntegrateOptions(pca=True))
        total = (d + 1) + summaries[1].V.shape[0]
        assert res.pca_rank == total - 1  # one duplicated direction dropped
        assert np.max(np.abs(res.theta - clean.theta)) < 1e-6

    def test_under_identified_after_reduction(self, grid):
        summaries, part = grid
        with pytest.raises(SingularMatrixError, match="under-identified"):
            integrate(summaries, part, IntegrateOptions(pca=True, pca_threshold=2.0))
