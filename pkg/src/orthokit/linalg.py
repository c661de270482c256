"""Dense linear algebra core.

Projector construction and application, column centering, tensor mode-1
products, and QR-backed least squares.  The orthogonal-complement projector
``I - Q Q^T`` is never materialized as an n-by-n matrix; it is applied as two
skinny matrix products, which keeps storage at O(n p) and is numerically
better behaved than normal equations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, RankDeficient

# Relative tolerance on pivoted-QR diagonals below which a column is
# declared linearly dependent.  Rank deficiency is a hard error, not a
# pseudo-inverse fallback.
RANK_RTOL = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert input to a 2-D float64 array with finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return m


def as_vector(a, name: str = "vector") -> np.ndarray:
    """Validate and convert input to a 1-D float64 array with finite entries."""
    v = np.asarray(a, dtype=np.float64).reshape(-1)
    if v.size and not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return v


def as_tensor(t, name: str = "tensor") -> np.ndarray:
    """Validate an observation-major dense tensor (first axis indexes rows)."""
    a = np.asarray(t, dtype=np.float64)
    if a.ndim < 1:
        raise DimensionMismatch(f"{name} must have at least one axis")
    if a.size and not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return a


def _pivoted_qr(a: np.ndarray):
    """Pivoted QR with a hard rank check.

    Returns ``(q, r, piv)``.  Raises ``RankDeficient`` naming the first
    original column whose pivot diagonal falls below ``RANK_RTOL`` times the
    largest diagonal.
    """
    q, r, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        raise RankDeficient(0, "matrix has no columns")
    thresh = RANK_RTOL * diag[0]
    bad = np.nonzero(diag <= thresh)[0]
    if diag[0] == 0.0 or bad.size:
        first_bad = int(piv[bad[0]]) if bad.size else int(piv[0])
        raise RankDeficient(first_bad)
    return q, r, piv


@dataclass(frozen=True)
class Projector:
    """Orthogonal projector onto the complement of a feature span.

    Stores only the thin-QR factor ``q`` (n-by-p, orthonormal columns spanning
    the same space as the protected features).  ``complement(M)`` computes
    ``M - q (q^T M)``, i.e. the residual of M after removing its component in
    the protected span.
    """

    q: np.ndarray
    n: int
    p: int

    def onto(self, m: np.ndarray) -> np.ndarray:
        """Project columns of ``m`` onto the protected span."""
        return self.q @ (self.q.T @ m)

    def complement(self, m: np.ndarray) -> np.ndarray:
        """Project columns of ``m`` onto the orthogonal complement."""
        return m - self.q @ (self.q.T @ m)


def build_projector(x) -> Projector:
    """Build the complement projector for a full-column-rank matrix.

    Raises ``DimensionMismatch`` if there are fewer rows than columns and
    ``RankDeficient`` if the columns are (numerically) linearly dependent.
    """
    xm = as_matrix(x, "protected features")
    n, p = xm.shape
    if p < 1:
        raise DimensionMismatch("need at least one column")
    if n < p:
        raise DimensionMismatch(f"need n >= p, got n={n} < p={p}")
    q, _, _ = _pivoted_qr(xm)
    return Projector(q=q, n=n, p=p)


def apply_complement(proj: Projector, m) -> np.ndarray:
    """Apply the complement projector to each column of ``m``."""
    mm = as_matrix(m, "matrix")
    if mm.shape[0] != proj.n:
        raise DimensionMismatch(
            f"row count {mm.shape[0]} does not match projector size {proj.n}"
        )
    return proj.complement(mm)


def mat_of_tensor(t: np.ndarray) -> np.ndarray:
    """Row-major matricization: reshape (n, d1, ..., dR) to (n, d1*...*dR)."""
    a = as_tensor(t)
    return a.reshape(a.shape[0], -1)


def tensor_of_mat(m: np.ndarray, dims) -> np.ndarray:
    """Inverse of ``mat_of_tensor`` for the given full dims tuple."""
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != m.size:
        raise DimensionMismatch(f"cannot reshape {m.size} entries into {dims}")
    return np.asarray(m, dtype=np.float64).reshape(dims)


def mode1_product(proj: Projector, t) -> np.ndarray:
    """Multiply the complement projector into the first (observation) mode.

    Equivalent to applying ``I_d (x) P`` to the stacked columns of the n-by-d
    matricization; implemented directly as the projector acting on that
    matricization, then reshaping back.
    """
    a = as_tensor(t)
    if a.shape[0] != proj.n:
        raise DimensionMismatch(
            f"leading tensor dim {a.shape[0]} does not match projector size {proj.n}"
        )
    flat = a.reshape(a.shape[0], -1)
    return proj.complement(flat).reshape(a.shape)


def center_columns(x) -> np.ndarray:
    """Subtract the column mean from every column."""
    xm = as_matrix(x, "matrix")
    return xm - xm.mean(axis=0, keepdims=True)


def least_squares(a, b) -> np.ndarray:
    """Minimum-residual solution of ``a @ x = b`` via pivoted QR.

    ``a`` must have full column rank; the residual is orthogonal to its
    column span.  ``b`` may be a vector or a matrix of right-hand sides;
    the result matches its shape convention.
    """
    am = as_matrix(a, "design matrix")
    b_arr = np.asarray(b, dtype=np.float64)
    vector_rhs = b_arr.ndim == 1
    bm = as_matrix(b_arr, "right-hand side")
    if am.shape[0] != bm.shape[0]:
        raise DimensionMismatch(
            f"row counts differ: {am.shape[0]} vs {bm.shape[0]}"
        )
    if am.shape[0] < am.shape[1]:
        raise RankDeficient(
            am.shape[0],
            f"{am.shape[0]}x{am.shape[1]} design cannot have full column rank",
        )
    q, r, piv = _pivoted_qr(am)
    k = am.shape[1]
    y = scipy.linalg.solve_triangular(r[:k, :k], q.T @ bm, lower=False)
    x = np.empty_like(y)
    x[piv] = y
    return x[:, 0] if vector_rhs else x
