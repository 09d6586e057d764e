"""Quadratic inference function estimation for correlated vector outcomes.

Fits a marginal regression model to each data source (one independent cohort
by one outcome block) with quadratic inference functions, then combines the
per-source fits in a single communication round into an integrated estimator
with sandwich covariance, goodness-of-fit and homogeneity tests, and a
model-selection criterion over homogeneity partitions.
"""

from .basis import BasisSet, basis_set
from .combine import (
    CohortSummary,
    IntegrateOptions,
    IntegratedResult,
    Partition,
    assemble_weight,
    build_cohort_summary,
    godambe_combine,
    integrate,
    pca_reduce,
    stack_sensitivities,
)
from .errors import (
    ConfigError,
    DegenerateFitError,
    DimensionError,
    InsufficientDataError,
    NonConvergenceError,
    PayloadError,
    QifError,
    SingularMatrixError,
)
from .inference import FitStatistic, NestedTestResult, compare_bic, nested_test, q_statistic
from .links import LinkFunction, link
from .simulate import MetricsReport, SimDesign, gen_binary, gen_gaussian, run_study
from .source import (
    SolverControl,
    SourceData,
    SourceFit,
    extended_score,
    fit_source,
    initial_estimate,
    qif_objective,
    sensitivity,
)

__version__ = "0.1.0"

__all__ = [
    "BasisSet",
    "basis_set",
    "CohortSummary",
    "IntegrateOptions",
    "IntegratedResult",
    "Partition",
    "assemble_weight",
    "build_cohort_summary",
    "godambe_combine",
    "integrate",
    "pca_reduce",
    "stack_sensitivities",
    "ConfigError",
    "DegenerateFitError",
    "DimensionError",
    "InsufficientDataError",
    "NonConvergenceError",
    "PayloadError",
    "QifError",
    "SingularMatrixError",
    "FitStatistic",
    "NestedTestResult",
    "compare_bic",
    "nested_test",
    "q_statistic",
    "LinkFunction",
    "link",
    "MetricsReport",
    "SimDesign",
    "gen_binary",
    "gen_gaussian",
    "run_study",
    "SolverControl",
    "SourceData",
    "SourceFit",
    "extended_score",
    "fit_source",
    "initial_estimate",
    "qif_objective",
    "sensitivity",
    "__version__",
]
