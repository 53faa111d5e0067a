"""Per-place subspace factorization and projection primitives.

Each place's descriptors are stacked as columns of a tall matrix D (n x m,
n >> m). A thin, column-pivoted QR or a truncated SVD turns D into an
orthonormal basis Q; a query is scored by the squared norm of its projection
onto span(Q). For unit-norm queries the least-squares residual is
``1 - ||Q^T d||^2``, so the residual is never formed explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import (
    DegeneratePlaceError,
    ParameterError,
    RankError,
    ShapeError,
)
from .validation import as_vector, check_dimension, ensure_unit_vector, unit_rows

METHOD_QR = "qr_full"
METHOD_SVD = "svd_truncated"


@dataclass(frozen=True, eq=False)
class PlaceMatrix:
    """A place's stacked unit-norm descriptors, one per column.

    Columns are assumed unit-norm as produced by the descriptor store; any
    upstream preprocessing must renormalize before building a PlaceMatrix.
    """

    place_id: str
    matrix: np.ndarray  # (n, m) float64
    column_ids: tuple[str, ...]
    column_headings: tuple[float, ...] | None = None

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", A)
        if A.ndim != 2 or A.shape[1] < 1:
            raise ShapeError(f"place matrix must be 2-D with >= 1 column, got {A.shape}")
        n, m = A.shape
        if n < m:
            raise ShapeError(f"place matrix must be tall (n >= m), got {n} x {m}")
        if len(self.column_ids) != m:
            raise ShapeError(f"{len(self.column_ids)} column ids for {m} columns")
        if self.column_headings is not None and len(self.column_headings) != m:
            raise ShapeError(f"{len(self.column_headings)} headings for {m} columns")
        unit_rows(A.T, name=f"place {self.place_id!r} columns")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def m(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True, eq=False)
class PlaceSubspace:
    """Orthonormal basis of a place's descriptor span plus factor metadata.

    ``basis`` is n x k with orthonormal columns. ``r_factor`` is k x m and
    maps basis coordinates back to the original columns in their original
    order (``basis @ r_factor`` reconstructs the retained span of the place
    matrix); it is upper-triangular only in the unpivoted full-rank case.
    """

    place_id: str
    basis: np.ndarray
    r_factor: np.ndarray | None
    method: str
    column_ids: tuple[str, ...]
    column_headings: tuple[float, ...] | None = None
    singular_values: np.ndarray | None = None
    tag: str = ""
    source_columns: np.ndarray | None = None  # (m, n) descriptor rows, storage dtype

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @property
    def m(self) -> int:
        return len(self.column_ids)

    def with_storage_dtype(self, dtype) -> "PlaceSubspace":
        """Round the numeric payloads through dtype (keeps float64 views exact)."""
        def cast(a):
            return None if a is None else np.ascontiguousarray(a, dtype=dtype)

        return replace(
            self,
            basis=cast(self.basis),
            r_factor=cast(self.r_factor),
            singular_values=cast(self.singular_values),
            source_columns=cast(self.source_columns),
        )


@dataclass(frozen=True)
class QueryProjection:
    """A query's footprint in one subspace: coordinates, magnitude, residual."""

    coords: np.ndarray
    magnitude: float
    residual: float


def factor_qr(pm: PlaceMatrix, dep_tol: float = 1e-8) -> PlaceSubspace:
    """Orthonormal basis of a place via column-pivoted Householder QR.

    Numerically dependent columns (pivoted R diagonal below
    ``dep_tol x largest diagonal``) are dropped from the basis, so the rank
    equals the numerical rank; duplicate reference images therefore cost
    nothing. Raises DegeneratePlaceError when every column is numerically
    zero.
    """
    if dep_tol <= 0:
        raise ParameterError(f"dep_tol must be positive, got {dep_tol}")
    Q, R, piv = scipy.linalg.qr(pm.matrix, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        raise DegeneratePlaceError(f"place {pm.place_id!r} has no independent columns")
    k = int(np.count_nonzero(diag >= dep_tol * diag[0]))
    if k == 0:
        raise DegeneratePlaceError(f"place {pm.place_id!r} has no independent columns")
    inverse = np.empty_like(piv)
    inverse[piv] = np.arange(piv.size)
    r_factor = np.ascontiguousarray(R[:k, :][:, inverse])
    return PlaceSubspace(
        place_id=pm.place_id,
        basis=np.ascontiguousarray(Q[:, :k]),
        r_factor=r_factor,
        method=METHOD_QR,
        column_ids=pm.column_ids,
        column_headings=pm.column_headings,
    )


def factor_svd(pm: PlaceMatrix, rank: int) -> PlaceSubspace:
    """Rank-truncated basis: the top ``rank`` left singular vectors of D."""
    k = int(rank)
    if not 1 <= k <= pm.m:
        raise ParameterError(f"svd rank must satisfy 1 <= k <= {pm.m}, got {k}")
    U, s, Vt = np.linalg.svd(pm.matrix, full_matrices=False)
    return PlaceSubspace(
        place_id=pm.place_id,
        basis=np.ascontiguousarray(U[:, :k]),
        r_factor=np.ascontiguousarray(s[:k, None] * Vt[:k, :]),
        method=METHOD_SVD,
        column_ids=pm.column_ids,
        column_headings=pm.column_headings,
        singular_values=s[:k].copy(),
    )


def project(sub: PlaceSubspace, d_q) -> QueryProjection:
    """Project a descriptor onto a place subspace.

    Non-unit inputs are normalized first, so the Pythagorean split
    ``magnitude^2 + residual = 1`` always holds.
    """
    d = as_vector(d_q, "query descriptor")
    check_dimension(d.size, sub.n, "query descriptor")
    d = ensure_unit_vector(d)
    coords = np.asarray(sub.basis, dtype=np.float64).T @ d
    magnitude = float(np.linalg.norm(coords))
    return QueryProjection(coords=coords, magnitude=magnitude, residual=1.0 - magnitude**2)


def residual_brute_force(pm: PlaceMatrix | np.ndarray, d_q, ridge: float = 1e-12) -> float:
    """Squared least-squares residual via the normal equations.

    Solves (D^T D) x = D^T d directly and returns ``||d - D x||^2``. This is
    the independent oracle for the projection path; it shares no
    factorization code. A tiny ridge is added only if D^T D is exactly
    singular.
    """
    D = pm.matrix if isinstance(pm, PlaceMatrix) else np.asarray(pm, dtype=np.float64)
    d = as_vector(d_q, "query descriptor")
    check_dimension(d.size, D.shape[0], "query descriptor")
    d = ensure_unit_vector(d)
    gram = D.T @ D
    rhs = D.T @ d
    try:
        x = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        try:
            x = np.linalg.solve(gram + ridge * np.eye(gram.shape[0]), rhs)
        except np.linalg.LinAlgError:
            raise RankError("normal equations singular even after regularization") from None
    r = d - D @ x
    return float(r @ r)


def numerical_rank(D: np.ndarray, tol: float = 1e-8) -> int:
    """Number of singular values above tol times the largest."""
    s = np.linalg.svd(np.asarray(D, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s >= tol * s[0]))


def place_matrix_from_rows(
    place_id: str,
    rows: np.ndarray,
    column_ids: Sequence[str],
    column_headings: Sequence[float] | None = None,
) -> PlaceMatrix:
    """Build a PlaceMatrix from descriptor rows (transposed to columns)."""
    return PlaceMatrix(
        place_id=place_id,
        matrix=np.ascontiguousarray(rows.T, dtype=np.float64),
        column_ids=tuple(column_ids),
        column_headings=tuple(column_headings) if column_headings is not None else None,
    )
