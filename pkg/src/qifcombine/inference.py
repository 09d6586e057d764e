"""Goodness-of-fit and homogeneity testing for integrated fits.

The over-identification statistic re-evaluates every source's mean score at
its integrated group estimate and forms

    Q_N = N * Psi_N(theta)' V^(-1) Psi_N(theta),

which is asymptotically chi-squared with sum_jk p*s_jk - G*p degrees of
freedom when the model and partition are correct.  The weight V is the one
assembled at the combine step (scores evaluated at the per-source
estimates); it is reused here rather than re-assembled at the integrated
estimate, preserving the one-extra-round protocol.

Nested partitions are compared by the difference of their statistics, and
candidate partitions are ranked by the criterion Q_N - log(N) * df (lower is
better).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .combine import IntegrateOptions, IntegratedResult, Partition, _System
from .errors import NestingError


@dataclass(frozen=True)
class FitStatistic:
    """Over-identification statistic for one partition's integrated fit."""

    q_n: float
    df: int
    p_value: float          # NaN when df == 0 (just-identified)
    bic: float              # q_n - log(N) * df
    N: int
    partition: Partition
    p: int = 0              # coefficients per group
    model_key: tuple = ()

    @property
    def just_identified(self) -> bool:
        return self.df == 0


@dataclass(frozen=True)
class NestedTestResult:
    """Chi-squared comparison of a coarse partition against a finer one."""

    statistic: float
    df: int
    p_value: float
    clamped: bool = False   # statistic was negative in finite samples, set to 0


def chi2_sf(x: float, df: int) -> float:
    """Upper-tail chi-squared probability via the regularized incomplete gamma."""
    return float(stats.chi2.sf(x, df))


def q_statistic(score_means: dict, summaries, result: IntegratedResult,
                opts: IntegrateOptions | None = None) -> FitStatistic:
    """Over-identification statistic at the integrated estimate.

    Parameters
    ----------
    score_means : dict
        (j, k) -> mean extended score of that source evaluated at the
        integrated estimate of the group containing (j, k).  These are the
        round-2 worker payloads.
    summaries : iterable of CohortSummary
        Round-1 payloads; only the weight matrix and sample sizes are used.
    result : IntegratedResult
        The combine-step output for the same partition.
    """
    opts = opts or IntegrateOptions()
    sys_ = _System(summaries, result.partition)
    missing = [jk for jk in sys_.sources if jk not in score_means]
    if missing:
        raise ValueError(f"missing second-round scores for sources: {missing}")
    psi = np.empty(sys_.D)
    for jk in sys_.sources:
        rs = sys_.row_slices[jk]
        vec = np.asarray(score_means[jk], dtype=float)
        if vec.shape != (rs.stop - rs.start,):
            raise ValueError(f"score for source {jk} has wrong length")
        psi[rs] = sys_.by_cohort[jk[1]].n * vec
    psi /= sys_.N

    if opts.pca:
        lam, owners = sys_.eigen_blocks()
        order = np.argsort(-lam, kind="stable")
        lam_sorted = lam[order]
        keep = lam_sorted > opts.pca_threshold * lam_sorted[0]
        proj = np.array([owners[i][1] @ psi[owners[i][0]] for i in order[keep]])
        q = float(sys_.N * np.sum(proj * proj / lam_sorted[keep]))
        moment_dim = int(np.count_nonzero(keep))
    else:
        sys_.factorize()
        q = float(sys_.N * psi @ sys_.solve_weight(psi))
        moment_dim = sys_.D
    q = max(q, 0.0)
    df = moment_dim - result.partition.G * sys_.p
    p_value = chi2_sf(q, df) if df > 0 else float("nan")
    return FitStatistic(
        q_n=q,
        df=df,
        p_value=p_value,
        bic=q - math.log(sys_.N) * df,
        N=sys_.N,
        partition=result.partition,
        p=sys_.p,
        model_key=sys_.model_key,
    )


def is_nested_coarsening(coarse: Partition, fine: Partition) -> bool:
    """True when every coarse group is a union of fine groups."""
    if (coarse.J, coarse.K) != (fine.J, fine.K):
        return False
    for members in fine.groups:
        owners = {coarse.group_of(j, k) for (j, k) in members}
        if len(owners) != 1:
            return False
    return True


def nested_test(fine: FitStatistic, coarse: FitStatistic) -> NestedTestResult:
    """Test coefficient homogeneity of a coarse partition against a finer one.

    The statistic is q_n(coarse) - q_n(fine) with (G_fine - G_coarse) * p
    degrees of freedom.  A negative difference (a finite-sample artifact
    under the shared weighting convention) is clamped to zero and flagged.
    """
    if fine.model_key and coarse.model_key and fine.model_key != coarse.model_key:
        raise NestingError(
            "the two fits use different link or working-structure configurations"
        )
    if not is_nested_coarsening(coarse.partition, fine.partition):
        raise NestingError("coarse partition is not a nested coarsening of the fine one")
    if fine.p != coarse.p or fine.N != coarse.N:
        raise NestingError("fits do not share a coefficient count and sample size")
    df = (fine.partition.G - coarse.partition.G) * fine.p
    q = coarse.q_n - fine.q_n
    clamped = q < 0.0
    q = max(q, 0.0)
    p_value = chi2_sf(q, df) if df > 0 else float("nan")
    return NestedTestResult(statistic=q, df=df, p_value=p_value, clamped=clamped)


def compare_bic(results) -> list:
    """Rank (partition, statistic) candidates by the selection criterion.

    Ascending in ``bic``; ties break toward fewer groups (the more
    parsimonious partition).  Returns the input pairs in ranked order.
    """
    items = list(results)
    keys = {stat.model_key for _, stat in items if stat.model_key}
    if len(keys) > 1:
        raise ValueError("candidates were fitted with different model configurations")
    return sorted(items, key=lambda it: (it[1].bic, it[0].G))
