"""Small dense linear-algebra helpers shared by the solvers."""

from __future__ import annotations

import numpy as np
from scipy import linalg

from .errors import SingularSystem

# Cholesky pivots below this fraction of the largest diagonal entry are
# treated as a numerically singular system.
PIVOT_RTOL = 1e-12


def spd_factor(A: np.ndarray):
    """Cholesky-factor a symmetric positive definite matrix or raise SingularSystem."""
    A = np.asarray(A, dtype=np.float64)
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularSystem(f"matrix of order {A.shape[0]} is not positive definite") from exc
    pivots = np.diag(factor[0]) ** 2
    if pivots.min() <= PIVOT_RTOL * max(np.max(np.diag(A)), np.finfo(float).tiny):
        raise SingularSystem(f"matrix of order {A.shape[0]} is numerically singular")
    return factor


def spd_solve(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if np.asarray(A).size == 0:
        return np.zeros_like(np.asarray(B, dtype=np.float64))
    return linalg.cho_solve(spd_factor(A), B, check_finite=False)


def spd_inv(A: np.ndarray) -> np.ndarray:
    return spd_solve(A, np.eye(np.asarray(A).shape[0]))
