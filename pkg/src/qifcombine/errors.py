"""Exception types raised across the package."""


class QifError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(QifError):
    """Inconsistent array shapes in source data or assembled systems."""


class DegenerateFitError(QifError):
    """Fitted means collapsed to 0 or 1 under the logit link."""


class InsufficientDataError(QifError):
    """Too few participants to estimate the score covariance."""


class SingularMatrixError(QifError):
    """A matrix that must be invertible is numerically singular."""


class NonConvergenceError(QifError):
    """An iterative solve failed to reach its tolerance."""


class ConfigError(QifError):
    """Invalid job or design configuration."""


class NestingError(QifError):
    """Partitions compared by the homogeneity test are not nested."""


class PayloadError(QifError):
    """Malformed, corrupted, or version-incompatible worker payload."""
