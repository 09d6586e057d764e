"""Reproducible generation of correlated vector outcomes and study metrics.

Designs describe a K-cohort by J-block grid: every participant in cohort k
carries one outcome vector per block plus covariates (an intercept and p - 1
continuous variables, each equicorrelated across all coordinates of the
participant so blocks share covariate structure).  Outcomes are drawn with a
per-source AR(1) or exchangeable correlation; Gaussian outcomes directly,
binary outcomes by thresholding a correlated Gaussian latent at the normal
quantile of the logistic mean, so the marginal means match the logit model
exactly.

Randomness is derived from per-replication substreams seeded by
(design seed, replication index), so replications are independent of each
other and of execution order.

Type-I error protocol
---------------------
The reported ERR column is a Wald rejection rate at the 5% level.  When
``StudyConfig.null_covariate`` is set (the default for study runs), one extra
covariate with true coefficient zero is appended to the design before
generation; its per-group rejection rate is the type-I error of testing a
genuinely absent effect, and appears in the report as the ``null`` row of
each group.  For the remaining coefficients ERR tests the true value, making
it the complement of CI coverage by construction.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .combine import (
    IntegrateOptions,
    IntegratedResult,
    Partition,
    build_cohort_summary,
    integrate,
)
from .errors import ConfigError, QifError
from .source import SolverControl, SourceData, fit_source

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

DESIGN_VERSION = 1

Z95 = 1.959963984540054  # two-sided 5% normal quantile

_RHO_STREAM = 0xD051
_REP_STREAM = 0x5EED


@dataclass
class SimDesign:
    """Declarative description of one simulated data grid.

    ``true_theta`` has one row per partition group; its column count fixes
    the coefficient dimension p (intercept plus p - 1 drawn covariates).
    ``rho`` may be a scalar, a {(j, k): value} mapping, or None to draw one
    value per source uniformly from [0.3, 0.7] using the design seed.
    """

    partition: Partition
    n_per_cohort: tuple
    block_sizes: tuple
    true_theta: np.ndarray
    link: str = "identity"
    correlation: str = "ar1"          # outcome correlation family per source
    rho: object = None
    sigma2: object = 1.0              # identity-link marginal variance per source
    covariate_rho: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.true_theta = np.atleast_2d(np.asarray(self.true_theta, dtype=float))
        self.n_per_cohort = tuple(int(n) for n in self.n_per_cohort)
        self.block_sizes = tuple(int(m) for m in self.block_sizes)
        if len(self.n_per_cohort) != self.partition.K:
            raise ValueError("n_per_cohort must list one size per cohort")
        if len(self.block_sizes) != self.partition.J:
            raise ValueError("block_sizes must list one dimension per block")
        if self.true_theta.shape[0] != self.partition.G:
            raise ValueError("true_theta must have one row per partition group")
        if self.correlation not in ("ar1", "exchangeable"):
            raise ValueError("correlation family must be 'ar1' or 'exchangeable'")

    @property
    def J(self) -> int:
        return self.partition.J

    @property
    def K(self) -> int:
        return self.partition.K

    @property
    def p(self) -> int:
        return self.true_theta.shape[1]

    def source_rho(self) -> dict:
        """Per-source correlation parameter, resolved deterministically."""
        pairs = [(j, k) for k in range(1, self.K + 1) for j in range(1, self.J + 1)]
        if isinstance(self.rho, dict):
            out = {(int(j), int(k)): float(v) for (j, k), v in self.rho.items()}
        elif self.rho is None:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, _RHO_STREAM]))
            out = {jk: float(r) for jk, r in zip(pairs, rng.uniform(0.3, 0.7, len(pairs)))}
        else:
            out = {jk: float(self.rho) for jk in pairs}
        for jk in pairs:
            r = out.get(jk)
            if r is None or not -1.0 < r < 1.0:
                raise ValueError(f"rho for source {jk} must lie in (-1, 1)")
            if self.correlation == "exchangeable" and r < 0.0:
                raise ValueError("exchangeable generation requires rho >= 0")
        return out

    def source_sigma2(self) -> dict:
        pairs = [(j, k) for k in range(1, self.K + 1) for j in range(1, self.J + 1)]
        if isinstance(self.sigma2, dict):
            out = {(int(j), int(k)): float(v) for (j, k), v in self.sigma2.items()}
        else:
            out = {jk: float(self.sigma2) for jk in pairs}
        for jk in pairs:
            if out.get(jk, 0.0) <= 0.0:
                raise ValueError(f"sigma2 for source {jk} must be positive")
        return out


def _correlated_latent(rng, n, m, rho, family):
    """Standard-normal margins with AR(1) or exchangeable correlation, O(m)."""
    e = rng.standard_normal((n, m))
    if family == "ar1":
        z = np.empty((n, m))
        z[:, 0] = e[:, 0]
        c = math.sqrt(1.0 - rho * rho)
        for r in range(1, m):
            z[:, r] = rho * z[:, r - 1] + c * e[:, r]
        return z
    shared = rng.standard_normal((n, 1))
    return math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * e


def _covariates(rng, n, M, p, rho_x):
    """Intercept plus p - 1 equicorrelated continuous covariate vectors."""
    X = np.empty((n, M, p))
    X[:, :, 0] = 1.0
    for c in range(1, p):
        shared = rng.standard_normal((n, 1))
        X[:, :, c] = math.sqrt(rho_x) * shared + math.sqrt(1.0 - rho_x) * rng.standard_normal((n, M))
    return X


def generate(design: SimDesign, replication: int = 0, basis: str | None = None) -> dict:
    """Draw one replication: {cohort k: {block j: SourceData}}.

    ``basis`` selects the working structure attached to the generated data
    (defaults to the design's generating correlation family).
    """
    basis = basis or design.correlation
    rng = np.random.default_rng(
        np.random.SeedSequence([design.seed, _REP_STREAM, int(replication)])
    )
    rho = design.source_rho()
    sig2 = design.source_sigma2()
    M = sum(design.block_sizes)
    offsets = np.concatenate([[0], np.cumsum(design.block_sizes)])
    out = {}
    for k in range(1, design.K + 1):
        n = design.n_per_cohort[k - 1]
        X = _covariates(rng, n, M, design.p, design.covariate_rho)
        blocks = {}
        for j in range(1, design.J + 1):
            Xj = X[:, offsets[j - 1]:offsets[j], :]
            th = design.true_theta[design.partition.group_of(j, k)]
            z = _correlated_latent(rng, n, design.block_sizes[j - 1], rho[(j, k)],
                                   design.correlation)
            eta = Xj @ th
            if design.link == "identity":
                y = eta + math.sqrt(sig2[(j, k)]) * z
            else:
                mu = 1.0 / (1.0 + np.exp(-eta))
                y = (z <= ndtri(mu)).astype(float)
            blocks[j] = SourceData(y=y, X=Xj, link=design.link, basis=basis)
        out[k] = blocks
    return out


def gen_gaussian(design: SimDesign, replication: int = 0, basis: str | None = None) -> dict:
    """Gaussian outcomes with per-source block correlation (identity link)."""
    if design.link != "identity":
        raise ValueError("gen_gaussian requires an identity-link design")
    return generate(design, replication, basis)


def gen_binary(design: SimDesign, replication: int = 0, basis: str | None = None) -> dict:
    """Correlated Bernoulli outcomes via Gaussian-copula thresholding (logit link).

    Marginal means equal the logistic model exactly; within-block dependence
    comes from the latent correlation.
    """
    if design.link != "logit":
        raise ValueError("gen_binary requires a logit-link design")
    return generate(design, replication, basis)


@dataclass
class StudyConfig:
    """Estimator configuration for a Monte Carlo study."""

    basis: str | None = None               # working structure; default = generator family
    solver: SolverControl = field(default_factory=SolverControl)
    options: IntegrateOptions = field(default_factory=IntegrateOptions)
    null_covariate: bool = True


@dataclass
class MetricsReport:
    """Per-coefficient Monte Carlo metrics over completed replications."""

    groups: np.ndarray        # group label per row
    coefficients: list        # coefficient label per row
    true_values: np.ndarray
    rmse: np.ndarray
    ese: np.ndarray
    ase: np.ndarray
    bias: np.ndarray
    coverage: np.ndarray
    ci_length: np.ndarray
    type1: np.ndarray
    replications: int
    n_failed: int
    failures: list = field(default_factory=list)

    COLUMNS = ("group", "coefficient", "true", "RMSE", "ESE", "ASE", "B", "CI", "L", "ERR")

    def rows(self) -> list:
        out = []
        for i in range(len(self.coefficients)):
            out.append({
                "group": int(self.groups[i]),
                "coefficient": self.coefficients[i],
                "true": float(self.true_values[i]),
                "RMSE": float(self.rmse[i]),
                "ESE": float(self.ese[i]),
                "ASE": float(self.ase[i]),
                "B": float(self.bias[i]),
                "CI": float(self.coverage[i]),
                "L": float(self.ci_length[i]),
                "ERR": float(self.type1[i]),
            })
        return out

    def to_dict(self) -> dict:
        return {
            "replications": self.replications,
            "n_failed": self.n_failed,
            "failures": [[int(r), str(m)] for r, m in self.failures],
            "metrics": self.rows(),
        }


def augment_null_covariate(design: SimDesign) -> SimDesign:
    """Append one covariate whose true coefficient is zero in every group."""
    theta = np.hstack([design.true_theta, np.zeros((design.partition.G, 1))])
    return replace(design, true_theta=theta)


def fit_replication(design: SimDesign, replication: int, config: StudyConfig):
    """Generate, fit all sources, and integrate one replication."""
    data = generate(design, replication, basis=config.basis)
    summaries = []
    for k, blocks in data.items():
        fits = {j: fit_source(d, ctrl=config.solver) for j, d in blocks.items()}
        bad = [j for j, f in fits.items() if not f.converged]
        if bad:
            raise QifError(f"cohort {k}: blocks {bad} did not converge")
        summaries.append(build_cohort_summary(k, fits))
    result = integrate(summaries, design.partition, config.options)
    return data, summaries, result


def run_study(design: SimDesign, replications: int,
              config: StudyConfig | None = None) -> MetricsReport:
    """Monte Carlo metrics for the integrated estimator on one design.

    Each replication generates a data grid, fits every source, integrates
    under the design partition, and records estimates, standard errors, CI
    hits, and Wald rejections.  Replications that fail to converge are
    excluded and counted, never silently dropped.
    """
    if replications < 2:
        raise ValueError("a study needs at least 2 replications")
    config = config or StudyConfig()
    run_design = augment_null_covariate(design) if config.null_covariate else design
    G, p = run_design.partition.G, run_design.p
    truth = run_design.true_theta.reshape(-1)

    estimates, ases = [], []
    failures = []
    for rep in range(replications):
        try:
            _, _, result = fit_replication(run_design, rep, config)
        except QifError as exc:
            failures.append((rep, str(exc)))
            continue
        estimates.append(result.theta)
        ases.append(result.ase())
    if len(estimates) < 2:
        raise QifError(f"only {len(estimates)} replications completed; cannot aggregate")
    est = np.asarray(estimates)
    ase = np.asarray(ases)
    err = est - truth
    hit = np.abs(err) <= Z95 * ase

    labels = []
    groups = []
    for g in range(G):
        for c in range(p):
            groups.append(g + 1)
            if c == 0:
                labels.append("intercept")
            elif config.null_covariate and c == p - 1:
                labels.append("null")
            else:
                labels.append(f"x{c}")
    return MetricsReport(
        groups=np.asarray(groups),
        coefficients=labels,
        true_values=truth,
        rmse=np.sqrt(np.mean(err ** 2, axis=0)),
        ese=np.std(est, axis=0, ddof=1),
        ase=np.mean(ase, axis=0),
        bias=np.mean(err, axis=0),
        coverage=np.mean(hit, axis=0),
        ci_length=np.mean(2.0 * Z95 * ase, axis=0),
        type1=np.mean(~hit, axis=0),
        replications=len(estimates),
        n_failed=len(failures),
        failures=failures,
    )


def load_design(path) -> tuple[SimDesign, StudyConfig, int]:
    """Parse a declarative TOML design file.

    Layout: a [design] table (format_version, link, correlation, seed,
    n_per_cohort, block_sizes, optional rho / sigma2 / covariate_rho), a
    [partition] table whose ``groups`` is either a shortcut string
    ('pooled', 'singletons', 'by_block') or explicit [[j, k], ...] lists, a
    [truth] table with one theta row per group, and a [study] table
    (replications, basis, null_covariate, pca, pca_threshold).
    """
    try:
        with open(path, "rb") as fh:
            doc = _toml.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"design file not found: {path}")
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}")
    try:
        d = doc["design"]
        if d.get("format_version") != DESIGN_VERSION:
            raise ConfigError(
                f"design format_version must be {DESIGN_VERSION}, got {d.get('format_version')}"
            )
        block_sizes = tuple(d["block_sizes"])
        n_per_cohort = tuple(d["n_per_cohort"])
        J, K = len(block_sizes), len(n_per_cohort)
        groups = doc.get("partition", {}).get("groups", "pooled")
        if isinstance(groups, str):
            factory = {"pooled": Partition.pooled, "singletons": Partition.singletons,
                       "by_block": Partition.by_block}.get(groups)
            if factory is None:
                raise ConfigError(f"unknown partition shortcut {groups!r}")
            partition = factory(J, K)
        else:
            partition = Partition(
                groups=tuple(tuple((int(j), int(k)) for j, k in g) for g in groups),
                J=J, K=K,
            )
        rho = d.get("rho")
        if isinstance(rho, list):
            rho = {(int(j), int(k)): float(v) for j, k, v in rho}
        design = SimDesign(
            partition=partition,
            n_per_cohort=n_per_cohort,
            block_sizes=block_sizes,
            true_theta=np.asarray(doc["truth"]["theta"], dtype=float),
            link=d.get("link", "identity"),
            correlation=d.get("correlation", "ar1"),
            rho=rho,
            sigma2=d.get("sigma2", 1.0),
            covariate_rho=float(d.get("covariate_rho", 0.3)),
            seed=int(d.get("seed", 0)),
        )
        study = doc.get("study", {})
        config = StudyConfig(
            basis=study.get("basis"),
            solver=SolverControl(**study.get("solver", {})),
            options=IntegrateOptions(
                pca=bool(study.get("pca", False)),
                pca_threshold=float(study.get("pca_threshold", 1e-10)),
            ),
            null_covariate=bool(study.get("null_covariate", True)),
        )
        replications = int(study.get("replications", 100))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid design: {exc}")
    return design, config, replications
