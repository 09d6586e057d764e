"""Link functions for the marginal mean model.

Each link maps the linear predictor ``eta = X @ theta`` to the mean of the
outcome vector.  Only the identity and logit links are supported; both expose
the forward map and its derivative d(mean)/d(eta), which the score and
sensitivity kernels consume elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFitError

# Fitted logit means must stay inside (MEAN_EPS, 1 - MEAN_EPS).
MEAN_EPS = 1e-12

_KINDS = ("identity", "logit")


@dataclass(frozen=True)
class LinkFunction:
    """A named link with forward map and derivative.

    Use the module-level :func:`link` factory rather than constructing
    instances directly.
    """

    kind: str

    def forward(self, eta: np.ndarray) -> np.ndarray:
        """Mean from linear predictor.

        Raises :class:`DegenerateFitError` if a logit mean underflows to
        exactly 0 or 1 (within ``MEAN_EPS``).
        """
        eta = np.asarray(eta, dtype=float)
        if not np.all(np.isfinite(eta)):
            raise ValueError("non-finite linear predictor")
        if self.kind == "identity":
            return eta
        mu = 1.0 / (1.0 + np.exp(-eta))
        if np.any(mu <= MEAN_EPS) or np.any(mu >= 1.0 - MEAN_EPS):
            raise DegenerateFitError(
                "logit means reached the boundary of (0, 1); the linear "
                "predictor is too extreme for a stable fit"
            )
        return mu

    def derivative(self, eta: np.ndarray) -> np.ndarray:
        """d(mean)/d(eta), evaluated elementwise."""
        eta = np.asarray(eta, dtype=float)
        if self.kind == "identity":
            return np.ones_like(eta)
        mu = self.forward(eta)
        return mu * (1.0 - mu)


def link(kind: str) -> LinkFunction:
    """Return the link function named ``kind`` ('identity' or 'logit')."""
    if kind not in _KINDS:
        raise ValueError(f"unknown link kind {kind!r}; expected one of {_KINDS}")
    return LinkFunction(kind)


IDENTITY = link("identity")
LOGIT = link("logit")
