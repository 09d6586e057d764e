"""One-round combination of per-source fits into the integrated estimator.

A homogeneity partition groups the (block j, cohort k) data sources that
share one coefficient vector.  Stacking the per-source sensitivities into a
group-block-diagonal matrix S and the per-source score covariances into the
permuted cohort-block-diagonal weight matrix V, the integrated estimate is
the closed form

    theta = (S' V^(-1) S)^(-1) S' V^(-1) b,    b = stack of n_k S_jk theta_jk,

with finite-sample covariance (S' V^(-1) S)^(-1).  Participants in different
cohorts never co-occur, so V is assembled from per-cohort blocks alone and
its factorization is done cohort by cohort.  When V is rank deficient (for
example under an equicorrelated working structure), the moment system is
projected onto the principal components of V with non-negligible eigenvalues
and solved in that basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DimensionError, SingularMatrixError
from .source import SourceFit


@dataclass(frozen=True)
class Partition:
    """Disjoint grouping of the J x K source grid by shared coefficients.

    ``groups`` lists, for each of the G groups, the (j, k) pairs it contains;
    the listed order fixes the canonical row order used by every assembled
    matrix (group by group, sources in listed order within a group).
    """

    groups: tuple
    J: int
    K: int

    def __post_init__(self):
        groups = tuple(tuple((int(j), int(k)) for j, k in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        seen = [jk for g in groups for jk in g]
        expected = {(j, k) for j in range(1, self.J + 1) for k in range(1, self.K + 1)}
        if not all(groups):
            raise ValueError("partition groups must be non-empty")
        if len(seen) != len(set(seen)) or set(seen) != expected:
            raise ValueError(
                f"partition groups must cover the {self.J}x{self.K} source grid exactly once"
            )

    @property
    def G(self) -> int:
        return len(self.groups)

    def sources(self) -> tuple:
        """All (j, k) pairs in canonical order."""
        return tuple(jk for g in self.groups for jk in g)

    def group_of(self, j: int, k: int) -> int:
        for g, members in enumerate(self.groups):
            if (j, k) in members:
                return g
        raise KeyError((j, k))

    @classmethod
    def pooled(cls, J: int, K: int) -> "Partition":
        """Single group: one coefficient vector shared by every source."""
        grid = tuple((j, k) for j in range(1, J + 1) for k in range(1, K + 1))
        return cls(groups=(grid,), J=J, K=K)

    @classmethod
    def singletons(cls, J: int, K: int) -> "Partition":
        """One group per source: no coefficients are shared."""
        grid = tuple(((j, k),) for j in range(1, J + 1) for k in range(1, K + 1))
        return cls(groups=grid, J=J, K=K)

    @classmethod
    def by_block(cls, J: int, K: int) -> "Partition":
        """One group per outcome block, pooled over cohorts."""
        grid = tuple(tuple((j, k) for k in range(1, K + 1)) for j in range(1, J + 1))
        return cls(groups=grid, J=J, K=K)


@dataclass
class CohortSummary:
    """Everything one cohort sends to the coordinator after round 1.

    ``V`` is the within-cohort score covariance across all of the cohort's
    blocks, (1/n) sum_i psi_i psi_i' with psi_i the concatenated per-block
    scores of participant i, blocks ordered by ``block_order``.  The payload
    contains no per-participant data; its size does not depend on n except
    through the integer itself.
    """

    cohort_id: int
    n: int
    fits: dict                 # block j -> SourceFit (psi archive stripped)
    V: np.ndarray
    block_order: tuple

    def block_slice(self, j: int) -> slice:
        start = 0
        for jj in self.block_order:
            d = self.fits[jj].S_hat.shape[0]
            if jj == j:
                return slice(start, start + d)
            start += d
        raise KeyError(j)

    def __eq__(self, other):
        if not isinstance(other, CohortSummary):
            return NotImplemented
        if (self.cohort_id, self.n, self.block_order) != (
            other.cohort_id,
            other.n,
            other.block_order,
        ):
            return False
        if not np.array_equal(self.V, other.V):
            return False
        if set(self.fits) != set(other.fits):
            return False
        for j, f in self.fits.items():
            o = other.fits[j]
            same = (
                np.array_equal(f.theta_hat, o.theta_hat)
                and np.array_equal(f.S_hat, o.S_hat)
                and f.q_value == o.q_value
                and f.converged == o.converged
                and f.iterations == o.iterations
                and f.ridged == o.ridged
                and (f.dispersion == o.dispersion
                     or (np.isnan(f.dispersion) and np.isnan(o.dispersion)))
                and f.link_kind == o.link_kind
                and f.basis_family == o.basis_family
            )
            if not same:
                return False
        return True


def build_cohort_summary(cohort_id: int, fits, block_order=None) -> CohortSummary:
    """Assemble a cohort's summary from its per-block fits.

    ``fits`` maps block index j to the SourceFit produced by that block's
    data; the per-participant score archives must still be attached (they are
    consumed here to form V, then dropped from the stored fits).
    """
    fits = dict(fits)
    order = tuple(block_order) if block_order is not None else tuple(sorted(fits))
    if set(order) != set(fits):
        raise ValueError("block_order must list exactly the fitted blocks")
    archives = []
    n = None
    for j in order:
        f = fits[j]
        if f.psi_at_fit is None:
            raise ValueError(f"block {j}: fit carries no score archive")
        if n is None:
            n = f.psi_at_fit.shape[0]
        elif f.psi_at_fit.shape[0] != n:
            raise DimensionError(
                "all blocks of a cohort must be fitted on the same participants"
            )
        archives.append(f.psi_at_fit)
    dims = [a.shape[1] for a in archives]
    D = sum(dims)
    V = np.empty((D, D))
    offs = np.concatenate([[0], np.cumsum(dims)])
    # Pairwise products keep each diagonal block bit-identical to the fit's
    # own score covariance.
    for a, pa in enumerate(archives):
        for b_, pb in enumerate(archives):
            if b_ < a:
                V[offs[a]:offs[a + 1], offs[b_]:offs[b_ + 1]] = V[
                    offs[b_]:offs[b_ + 1], offs[a]:offs[a + 1]
                ].T
            else:
                V[offs[a]:offs[a + 1], offs[b_]:offs[b_ + 1]] = pa.T @ pb / n
    slim = {j: replace(fits[j], psi_at_fit=None, C_hat=None) for j in order}
    return CohortSummary(cohort_id=int(cohort_id), n=int(n), fits=slim, V=V, block_order=order)


@dataclass
class IntegrateOptions:
    """Options for :func:`integrate`."""

    pca: bool = False
    pca_threshold: float = 1e-10   # relative to the largest eigenvalue of V


@dataclass
class IntegratedResult:
    """Integrated estimate with sandwich covariance and diagnostics."""

    theta: np.ndarray            # (G*p,) group estimates, stacked
    covariance: np.ndarray       # (G*p, G*p) finite-sample covariance of theta
    N: int
    p: int
    partition: Partition
    pca_rank: int | None         # retained moment dimension, None if not reduced
    diagnostics: dict = field(default_factory=dict)
    model_key: tuple = ()

    def group_estimate(self, g: int) -> np.ndarray:
        return self.theta[g * self.p:(g + 1) * self.p]

    def group_covariance(self, g: int) -> np.ndarray:
        sl = slice(g * self.p, (g + 1) * self.p)
        return self.covariance[sl, sl]

    def ase(self) -> np.ndarray:
        """Asymptotic standard errors, sqrt of the covariance diagonal."""
        return np.sqrt(np.diag(self.covariance))

    def avar(self) -> np.ndarray:
        """Asymptotic covariance of sqrt(N) * theta."""
        return self.N * self.covariance


class _System:
    """Canonically ordered moment system assembled from cohort summaries."""

    def __init__(self, summaries, partition: Partition):
        by_cohort = {cs.cohort_id: cs for cs in summaries}
        if len(by_cohort) != len(list(summaries)):
            raise ValueError("duplicate cohort ids in summaries")
        cohorts = {k for _, k in partition.sources()}
        missing = cohorts - set(by_cohort)
        if missing:
            raise ValueError(f"missing cohort summaries: {sorted(missing)}")
        self.partition = partition
        self.by_cohort = by_cohort
        self.N = sum(by_cohort[k].n for k in cohorts)
        self.sources = partition.sources()

        fits = {}
        p = None
        for (j, k) in self.sources:
            cs = by_cohort[k]
            if j not in cs.fits:
                raise ValueError(f"cohort {k} has no fit for block {j}")
            f = cs.fits[j]
            if p is None:
                p = f.theta_hat.shape[0]
            elif f.theta_hat.shape[0] != p:
                raise DimensionError("all sources must share the coefficient count p")
            fits[(j, k)] = f
        self.p = p
        self.fits = fits

        # Within one group every source must share the link (and p, above).
        for members in partition.groups:
            kinds = {fits[jk].link_kind for jk in members}
            if len(kinds) > 1:
                raise ValueError(f"group {members} mixes link kinds {sorted(kinds)}")

        offsets = [0]
        for jk in self.sources:
            offsets.append(offsets[-1] + fits[jk].S_hat.shape[0])
        self.row_slices = {
            jk: slice(offsets[i], offsets[i + 1]) for i, jk in enumerate(self.sources)
        }
        self.D = offsets[-1]

        G = partition.G
        self.S = np.zeros((self.D, G * p))
        self.rhs = np.zeros(self.D)
        for g, members in enumerate(partition.groups):
            for (j, k) in members:
                f = fits[(j, k)]
                nk = by_cohort[k].n
                rs = self.row_slices[(j, k)]
                self.S[rs, g * p:(g + 1) * p] = nk * f.S_hat
                self.rhs[rs] = nk * (f.S_hat @ f.theta_hat)

        # Per-cohort weight blocks (n_k/N) V_k with their canonical indices.
        self.blocks = []
        for k in sorted(cohorts):
            cs = by_cohort[k]
            idx = np.concatenate(
                [np.arange(self.row_slices[(j, k)].start, self.row_slices[(j, k)].stop)
                 for j in cs.block_order if (j, k) in self.row_slices]
            )
            expect = sum(cs.fits[j].S_hat.shape[0] for j in cs.block_order)
            if cs.V.shape != (expect, expect):
                raise DimensionError(
                    f"cohort {k}: V has shape {cs.V.shape}, expected {(expect, expect)}"
                )
            self.blocks.append((k, idx, (cs.n / self.N) * cs.V))

        self.model_key = tuple(
            (j, k, fits[(j, k)].link_kind, fits[(j, k)].basis_family,
             fits[(j, k)].S_hat.shape[0] // p)
            for (j, k) in self.sources
        )

    def dense_weight(self) -> np.ndarray:
        V = np.zeros((self.D, self.D))
        for _, idx, W in self.blocks:
            V[np.ix_(idx, idx)] = W
        return V

    def factorize(self, rcond_floor: float = 1e-13):
        """Per-cohort Cholesky factors; raises SingularMatrixError on rank loss."""
        factors = []
        conds = {}
        for k, idx, W in self.blocks:
            ev = np.linalg.eigvalsh(0.5 * (W + W.T))
            if ev[0] <= 0.0 or ev[0] < rcond_floor * ev[-1]:
                raise SingularMatrixError(
                    f"weight matrix block for cohort {k} is numerically rank "
                    "deficient; re-run with the PCA fallback enabled "
                    "(IntegrateOptions(pca=True))"
                )
            conds[k] = float(ev[-1] / ev[0])
            try:
                factors.append((idx, cho_factor(W, lower=True)))
            except np.linalg.LinAlgError as exc:
                raise SingularMatrixError(
                    f"weight matrix block for cohort {k} is not positive definite; "
                    "re-run with the PCA fallback enabled "
                    "(IntegrateOptions(pca=True))"
                ) from exc
        self._factors = factors
        return conds

    def solve_weight(self, X: np.ndarray) -> np.ndarray:
        out = np.empty_like(X)
        for idx, fac in self._factors:
            out[idx] = cho_solve(fac, X[idx])
        return out

    def eigen_blocks(self):
        """Eigenpairs of the weight matrix, assembled per cohort block.

        Because the weight is block diagonal in cohort order, its spectrum is
        the union of the block spectra; eigenvectors live on each block's
        canonical indices.
        """
        lams, owners = [], []
        for _, idx, W in self.blocks:
            lam, Q = np.linalg.eigh(0.5 * (W + W.T))
            for i in range(lam.size):
                lams.append(lam[i])
                owners.append((idx, Q[:, i]))
        return np.asarray(lams), owners


def stack_sensitivities(summaries, partition: Partition) -> np.ndarray:
    """Group-block-diagonal stack of the scaled sensitivities n_k * S_jk.

    Rows follow the canonical source order; columns hold G blocks of p.
    """
    return _System(summaries, partition).S


def assemble_weight(summaries, partition: Partition) -> np.ndarray:
    """Dense weight matrix V in canonical row order.

    Entries pairing sources from different cohorts are exactly zero; each
    cohort's block is (n_k / N) * V_k permuted into canonical order.
    """
    return _System(summaries, partition).dense_weight()


@dataclass
class ReducedSystem:
    """Moment system projected on principal components of the weight."""

    S: np.ndarray            # (r, G*p)
    eigenvalues: np.ndarray  # (r,) descending, all positive
    rhs: np.ndarray          # (r,)
    rank: int
    explained: np.ndarray    # cumulative explained-variance fractions, full spectrum


def pca_reduce(S: np.ndarray, V: np.ndarray, rhs: np.ndarray,
               threshold: float = 1e-10) -> ReducedSystem:
    """Project a moment system onto the principal components of its weight.

    Eigenvectors of V with eigenvalue > threshold * max(eigenvalue) are
    retained; S, rhs, and V are expressed in that basis, where the reduced
    weight is diagonal and trivially invertible.
    """
    lam, Q = np.linalg.eigh(0.5 * (V + V.T))
    order = np.argsort(-lam, kind="stable")
    lam = lam[order]
    Q = Q[:, order]
    total = float(np.sum(np.clip(lam, 0.0, None)))
    explained = np.cumsum(np.clip(lam, 0.0, None)) / total if total > 0 else np.zeros_like(lam)
    keep = lam > threshold * lam[0]
    r = int(np.count_nonzero(keep))
    if r < S.shape[1]:
        raise SingularMatrixError(
            f"retained moment dimension {r} is below the parameter count "
            f"{S.shape[1]}: system under-identified after reduction"
        )
    E = Q[:, keep]
    return ReducedSystem(
        S=E.T @ S,
        eigenvalues=lam[keep],
        rhs=E.T @ rhs,
        rank=r,
        explained=explained,
    )


def _finish(A: np.ndarray, c: np.ndarray, sys_: _System, pca_rank, diagnostics):
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    diagnostics["weight_form_asymmetry"] = asym
    A = 0.5 * (A + A.T)
    try:
        fac = cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            "information matrix S' V^(-1) S is singular: some partition group "
            "carries no identifying information"
        ) from exc
    theta = cho_solve(fac, c)
    # Var(theta) = N (S' V^(-1) S)^(-1): the stacked S carries n_k scaling and
    # the moment average a 1/N, leaving one factor of N in the sandwich.
    cov = sys_.N * cho_solve(fac, np.eye(A.shape[0]))
    cov = 0.5 * (cov + cov.T)
    ev = np.linalg.eigvalsh(A)
    diagnostics["cond_information"] = float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")
    return IntegratedResult(
        theta=theta,
        covariance=cov,
        N=sys_.N,
        p=sys_.p,
        partition=sys_.partition,
        pca_rank=pca_rank,
        diagnostics=diagnostics,
        model_key=sys_.model_key,
    )


def integrate(summaries, partition: Partition,
              opts: IntegrateOptions | None = None) -> IntegratedResult:
    """Combine per-source fits into the integrated estimator.

    Solves the two weighted systems by symmetric factorization of the
    cohort-block weight matrix; no dense inverse of V is ever formed.  With
    ``opts.pca`` the moment system is projected onto principal components of
    V before solving, which handles rank-deficient weight matrices.
    """
    opts = opts or IntegrateOptions()
    sys_ = _System(summaries, partition)
    diagnostics: dict = {
        "non_converged_sources": [
            jk for jk in sys_.sources if not sys_.fits[jk].converged
        ],
        "ridged_sources": [jk for jk in sys_.sources if sys_.fits[jk].ridged],
    }
    if opts.pca:
        lam, owners = sys_.eigen_blocks()
        order = np.argsort(-lam, kind="stable")
        lam_sorted = lam[order]
        keep = lam_sorted > opts.pca_threshold * lam_sorted[0]
        r = int(np.count_nonzero(keep))
        if r < sys_.S.shape[1]:
            raise SingularMatrixError(
                f"retained moment dimension {r} is below the parameter count "
                f"{sys_.S.shape[1]}: system under-identified after reduction"
            )
        kept = [owners[i] for i in order[keep]]
        lam_kept = lam_sorted[keep]
        Sr = np.empty((r, sys_.S.shape[1]))
        br = np.empty(r)
        for i, (idx, q) in enumerate(kept):
            Sr[i] = q @ sys_.S[idx]
            br[i] = q @ sys_.rhs[idx]
        A = Sr.T @ (Sr / lam_kept[:, None])
        c = Sr.T @ (br / lam_kept)
        diagnostics["dropped_eigenvalues"] = int(lam.size - r)
        return _finish(A, c, sys_, r, diagnostics)
    diagnostics["cond_weight_blocks"] = sys_.factorize()
    A = sys_.S.T @ sys_.solve_weight(sys_.S)
    c = sys_.S.T @ sys_.solve_weight(sys_.rhs)
    return _finish(A, c, sys_, None, diagnostics)


def godambe_combine(summaries, partition: Partition) -> IntegratedResult:
    """Fully pooled combination via per-cohort Godambe information blocks.

    Requires a single-group partition.  For each cohort the inverse of V_k is
    formed explicitly and its (i, j) block is sandwiched between the block
    sensitivities, J_ijk = S_ik' [V_k^(-1)]^(i;j) S_jk; the estimate is the
    J-weighted average of the per-source estimates.  Serves as an independent
    cross-check of :func:`integrate`.
    """
    if partition.G != 1:
        raise ValueError("godambe_combine requires a single-group partition")
    sys_ = _System(summaries, partition)
    p = sys_.p
    A = np.zeros((p, p))
    c = np.zeros(p)
    for k in sorted({k for _, k in sys_.sources}):
        cs = sys_.by_cohort[k]
        try:
            Vinv = np.linalg.inv(cs.V)
        except np.linalg.LinAlgError as exc:
            raise SingularMatrixError(f"V for cohort {k} is singular") from exc
        for i in cs.block_order:
            si = cs.block_slice(i)
            for j in cs.block_order:
                sj = cs.block_slice(j)
                Jij = cs.n * (cs.fits[i].S_hat.T @ Vinv[si, sj] @ cs.fits[j].S_hat)
                A += Jij
                c += Jij @ cs.fits[j].theta_hat
    try:
        fac = cho_factor(0.5 * (A + A.T), lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("pooled Godambe information is singular") from exc
    theta = cho_solve(fac, c)
    # integrate's information is N * sum_k sum_ij n_k J_ijk and its covariance
    # N times that inverse, so here the covariance is (sum n_k J)^(-1).
    cov = cho_solve(fac, np.eye(p))
    cov = 0.5 * (cov + cov.T)
    return IntegratedResult(
        theta=theta,
        covariance=cov,
        N=sys_.N,
        p=p,
        partition=partition,
        pca_rank=None,
        diagnostics={},
        model_key=sys_.model_key,
    )
