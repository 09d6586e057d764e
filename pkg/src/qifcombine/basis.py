"""Working-correlation basis matrices.

The inverse working correlation of an m-variate outcome is approximated by a
linear span of known 0/1 symmetric basis matrices.  Three families are
supported:

- ``independence``: B1 = I                                   (s = 1)
- ``ar1``:          B1 = I, B2 = ones on the super/sub diagonal (s = 2)
- ``exchangeable``: B1 = I, B2 = all-ones minus I            (s = 2)

The expansion coefficients are never estimated; only the matrices enter the
extended score.  Matrix-vector products are computed structurally (shifted or
summed slices), so no m x m matrix is ever materialized on the hot path.
``materialize`` builds the dense matrices for small m and is intended for
tests and oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FAMILIES = {"independence": 1, "ar1": 2, "exchangeable": 2}


@dataclass(frozen=True)
class BasisSet:
    """Basis family with structural matrix products.

    ``apply(index, arr, axis)`` computes ``B_index @ v`` along ``axis`` for
    every slice of ``arr``; index 0 is always the identity.
    """

    family: str

    @property
    def size(self) -> int:
        """Number of basis matrices s."""
        return _FAMILIES[self.family]

    def apply(self, index: int, arr: np.ndarray, axis: int = -1) -> np.ndarray:
        if not 0 <= index < self.size:
            raise IndexError(f"basis index {index} out of range for {self.family}")
        if index == 0:
            return np.asarray(arr, dtype=float)
        a = np.moveaxis(np.asarray(arr, dtype=float), axis, -1)
        out = np.zeros_like(a)
        if self.family == "ar1":
            out[..., 1:] += a[..., :-1]
            out[..., :-1] += a[..., 1:]
        else:  # exchangeable: (J - I) v = sum(v) - v
            out = a.sum(axis=-1, keepdims=True) - a
        return np.moveaxis(out, -1, axis)

    def materialize(self, m: int) -> list[np.ndarray]:
        """Dense basis matrices for dimension m (tests and oracles only)."""
        mats = [np.eye(m)]
        if self.family == "ar1":
            band = np.zeros((m, m))
            idx = np.arange(m - 1)
            band[idx, idx + 1] = 1.0
            band[idx + 1, idx] = 1.0
            mats.append(band)
        elif self.family == "exchangeable":
            mats.append(np.ones((m, m)) - np.eye(m))
        return mats


def basis_set(family: str) -> BasisSet:
    """Return the basis set for ``family``."""
    if family not in _FAMILIES:
        raise ValueError(
            f"unknown basis family {family!r}; expected one of {tuple(_FAMILIES)}"
        )
    return BasisSet(family)
