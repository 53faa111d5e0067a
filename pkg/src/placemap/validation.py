"""Input validation helpers shared by the core modules and the estimators."""

from __future__ import annotations

import numpy as np

from .errors import DataError, DegenerateInputError, ShapeError

# Unit-norm tolerance for descriptors held in 32-bit storage.
UNIT_TOL = 1e-6


def as_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    A = np.asarray(X, dtype=np.float64)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    if A.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got ndim={A.ndim}")
    if A.size and not np.isfinite(A).all():
        raise DataError(f"{name} contains non-finite entries")
    return A


def as_vector(v, name: str = "v") -> np.ndarray:
    """Coerce to a 1-D float64 array, rejecting non-finite entries."""
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ShapeError(f"{name} must be non-empty")
    if not np.isfinite(a).all():
        raise DataError(f"{name} contains non-finite entries")
    return a


def check_dimension(actual: int, expected: int, name: str = "descriptor") -> None:
    if actual != expected:
        raise ShapeError(f"{name} has dimension {actual}, expected {expected}")


def unit_rows(X: np.ndarray, name: str = "X", tol: float = UNIT_TOL) -> None:
    """Require every row of X to be unit-norm within tol."""
    norms = np.linalg.norm(X, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise DataError(
            f"{name} row {bad[0]} has norm {norms[bad[0]]:.6g}, expected 1 within {tol:g}"
        )


def ensure_unit_vector(v: np.ndarray, tol: float = UNIT_TOL) -> np.ndarray:
    """Return v normalized to unit length; pass unit vectors through unchanged."""
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    if abs(n - 1.0) <= tol:
        return v
    return v / n
