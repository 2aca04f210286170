"""Sequential sparse and dense linear algebra kernels.

Everything here is pure: functions never mutate their inputs, and matrices are
treated as read-only once constructed, so they can be shared across workers.
Vectors are plain 1-D ``float64`` numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InvalidArgumentError, IterationLimitError, NotSPDError

__all__ = [
    "CsrMatrix",
    "CholeskyFactor",
    "spmv",
    "norm2",
    "cholesky_factorize",
    "cholesky_solve",
    "cg_solve",
    "conjugate_gradient",
    "as_vector",
]


def as_vector(x) -> np.ndarray:
    """Return ``x`` as a contiguous 1-D float64 array (no copy when possible)."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"expected a 1-D vector, got shape {arr.shape}")
    return arr


@dataclass(eq=False)
class CsrMatrix:
    """Sparse matrix in compressed sparse row form.

    Column indices are strictly increasing within each row. The structure is
    validated on construction; instances should be treated as immutable.
    """

    num_rows: int
    num_cols: int
    row_ptrs: np.ndarray
    col_idxs: np.ndarray
    values: np.ndarray
    _row_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.num_rows = int(self.num_rows)
        self.num_cols = int(self.num_cols)
        self.row_ptrs = np.array(self.row_ptrs, dtype=np.int64)
        self.col_idxs = np.array(self.col_idxs, dtype=np.int64)
        self.values = np.array(self.values, dtype=np.float64)
        self._validate()
        counts = np.diff(self.row_ptrs)
        self._row_ids = np.repeat(np.arange(self.num_rows, dtype=np.int64), counts)
        for arr in (self.row_ptrs, self.col_idxs, self.values, self._row_ids):
            arr.flags.writeable = False

    def _validate(self):
        if self.num_rows < 0 or self.num_cols < 0:
            raise InvalidArgumentError("matrix dimensions must be non-negative")
        rp = self.row_ptrs
        if rp.ndim != 1 or len(rp) != self.num_rows + 1:
            raise InvalidArgumentError("row_ptrs must have length num_rows + 1")
        if rp[0] != 0:
            raise InvalidArgumentError("row_ptrs[0] must be 0")
        nnz = int(rp[-1])
        if len(self.col_idxs) != nnz or len(self.values) != nnz:
            raise InvalidArgumentError("row_ptrs[-1], len(col_idxs) and len(values) disagree")
        if np.any(np.diff(rp) < 0):
            raise InvalidArgumentError("row_ptrs must be monotone")
        if nnz:
            c = self.col_idxs
            if c.min() < 0 or c.max() >= self.num_cols:
                raise InvalidArgumentError("column index out of range")
            # strictly increasing inside a row <=> every step that is not a row
            # start increases
            steps = np.diff(c)
            starts = np.zeros(nnz, dtype=bool)
            starts[rp[:-1][rp[:-1] < nnz]] = True
            if np.any(steps[~starts[1:]] <= 0):
                raise InvalidArgumentError("column indices must be strictly increasing within a row")

    @property
    def nnz(self) -> int:
        return int(self.row_ptrs[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_rows, self.num_cols)

    @property
    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry (COO-style expansion)."""
        return self._row_ids

    @classmethod
    def from_coo(cls, num_rows, num_cols, rows, cols, vals, sum_duplicates=True):
        """Build from triplets. Entries are sorted; duplicates are summed
        (or rejected when ``sum_duplicates`` is False)."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (len(rows) == len(cols) == len(vals)):
            raise InvalidArgumentError("triplet arrays must have equal length")
        if len(rows) and (rows.min() < 0 or rows.max() >= num_rows):
            raise InvalidArgumentError("row index out of range")
        if len(cols) and (cols.min() < 0 or cols.max() >= num_cols):
            raise InvalidArgumentError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if dup.any():
                if not sum_duplicates:
                    raise InvalidArgumentError("duplicate entries")
                keep = np.concatenate(([True], ~dup))
                group = np.cumsum(keep) - 1
                vals = np.bincount(group, weights=vals)
                rows, cols = rows[keep], cols[keep]
        row_ptrs = np.zeros(num_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=num_rows), out=row_ptrs[1:])
        return cls(num_rows, num_cols, row_ptrs, cols, vals)

    @classmethod
    def from_dense(cls, a):
        """Build from a dense 2-D array; exact zeros are not stored."""
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise InvalidArgumentError("expected a 2-D array")
        rows, cols = np.nonzero(a)
        return cls.from_coo(a.shape[0], a.shape[1], rows, cols, a[rows, cols])

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls(n, n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))

    @classmethod
    def empty(cls, num_rows, num_cols):
        return cls(num_rows, num_cols, np.zeros(num_rows + 1, dtype=np.int64),
                   np.zeros(0, dtype=np.int64), np.zeros(0))

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_rows, self.num_cols))
        out[self._row_ids, self.col_idxs] = self.values
        return out

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_coo(self.num_cols, self.num_rows, self.col_idxs,
                                  self._row_ids, self.values, sum_duplicates=False)

    def row(self, i):
        """(column indices, values) of row ``i``."""
        lo, hi = self.row_ptrs[i], self.row_ptrs[i + 1]
        return self.col_idxs[lo:hi], self.values[lo:hi]

    def diagonal(self) -> np.ndarray:
        n = min(self.num_rows, self.num_cols)
        d = np.zeros(n)
        mask = (self._row_ids == self.col_idxs) & (self._row_ids < n)
        d[self._row_ids[mask]] = self.values[mask]
        return d

    def is_symmetric(self, rtol=0.0) -> bool:
        """Structural and numerical symmetry; exact unless ``rtol`` > 0."""
        if self.num_rows != self.num_cols:
            return False
        t = self.transpose()
        if not (np.array_equal(t.row_ptrs, self.row_ptrs)
                and np.array_equal(t.col_idxs, self.col_idxs)):
            return False
        if rtol == 0.0:
            return bool(np.array_equal(t.values, self.values))
        scale = np.abs(self.values).max(initial=0.0)
        return bool(np.all(np.abs(t.values - self.values) <= rtol * scale))

    def lower_bandwidth(self) -> int:
        """max(i - j) over stored entries with j <= i."""
        if self.nnz == 0:
            return 0
        return int(max(0, (self._row_ids - self.col_idxs).max()))

    def equals(self, other: "CsrMatrix") -> bool:
        """Bit-exact equality of shape, structure and values."""
        return (self.shape == other.shape
                and np.array_equal(self.row_ptrs, other.row_ptrs)
                and np.array_equal(self.col_idxs, other.col_idxs)
                and np.array_equal(self.values.view(np.int64), other.values.view(np.int64)))

    def __repr__(self):
        return f"CsrMatrix({self.num_rows}x{self.num_cols}, nnz={self.nnz})"


def spmv(m: CsrMatrix, x) -> np.ndarray:
    """Sparse matrix-vector product ``m @ x``."""
    x = as_vector(x)
    if len(x) != m.num_cols:
        raise InvalidArgumentError(
            f"spmv dimension mismatch: matrix has {m.num_cols} columns, vector has {len(x)} entries")
    if m.nnz == 0:
        return np.zeros(m.num_rows)
    return np.bincount(m.row_ids, weights=m.values * x[m.col_idxs], minlength=m.num_rows)


def norm2(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0
    return float(np.sqrt(np.dot(x, x)))


# Use the banded packing whenever it is at most a quarter of the dense storage.
_BANDED_RATIO = 0.25


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """Lower Cholesky factor ``L`` with ``L @ L.T == A``.

    Stored either dense (``storage == "dense"``, ``data`` is the n x n lower
    triangle) or in LAPACK lower-banded packing (``storage == "banded"``,
    ``data[k, j] == L[j + k, j]``).
    """

    dimension: int
    storage: str
    data: np.ndarray

    @property
    def bandwidth(self) -> int:
        if self.storage == "banded":
            return self.data.shape[0] - 1
        return max(self.dimension - 1, 0)

    @property
    def lower_factor(self) -> np.ndarray:
        """Dense lower-triangular ``L`` (expanded from banded storage if needed)."""
        if self.storage == "dense":
            return self.data
        n, kd = self.dimension, self.data.shape[0] - 1
        out = np.zeros((n, n))
        for k in range(kd + 1):
            idx = np.arange(n - k)
            out[idx + k, idx] = self.data[k, : n - k]
        return out


def cholesky_factorize(m: CsrMatrix, storage: str = "auto") -> CholeskyFactor:
    """Cholesky factorization of a symmetric positive definite CSR matrix.

    Parameters
    ----------
    m : CsrMatrix
        Square, symmetric matrix. Symmetry is checked exactly.
    storage : {"auto", "dense", "banded"}
        Packing of the factor. ``"auto"`` picks banded packing when the lower
        bandwidth is small enough to save memory, which it is for grid
        problems ordered row by row.

    Raises
    ------
    InvalidArgumentError
        If ``m`` is not square or not symmetric.
    NotSPDError
        If a non-positive pivot is met.
    """
    if m.num_rows != m.num_cols:
        raise InvalidArgumentError(f"Cholesky needs a square matrix, got {m.shape}")
    if not m.is_symmetric():
        raise InvalidArgumentError("Cholesky needs a symmetric matrix")
    n = m.num_rows
    if n == 0:
        return CholeskyFactor(0, "dense", np.zeros((0, 0)))
    kd = m.lower_bandwidth()
    if storage == "auto":
        storage = "banded" if (kd + 1) <= _BANDED_RATIO * n else "dense"
    if storage == "banded":
        ab = np.zeros((kd + 1, n))
        lower = m.row_ids >= m.col_idxs
        rows, cols = m.row_ids[lower], m.col_idxs[lower]
        ab[rows - cols, cols] = m.values[lower]
        try:
            cb = scipy.linalg.cholesky_banded(ab, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotSPDError(f"matrix is not positive definite: {exc}") from None
        return CholeskyFactor(n, "banded", cb)
    if storage != "dense":
        raise InvalidArgumentError(f"unknown storage {storage!r}")
    try:
        low = np.linalg.cholesky(m.to_dense())
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(f"matrix is not positive definite: {exc}") from None
    return CholeskyFactor(n, "dense", low)


def cholesky_solve(f: CholeskyFactor, b) -> np.ndarray:
    """Solve ``A x = b`` given the Cholesky factor of ``A``."""
    b = as_vector(b)
    if len(b) != f.dimension:
        raise InvalidArgumentError(
            f"cholesky_solve dimension mismatch: factor is {f.dimension}, rhs is {len(b)}")
    if f.dimension == 0:
        return np.zeros(0)
    if f.storage == "banded":
        return scipy.linalg.cho_solve_banded((f.data, True), b, check_finite=False)
    return scipy.linalg.cho_solve((f.data, True), b, check_finite=False)


def conjugate_gradient(m: CsrMatrix, b, rel_tol: float, max_iters: int, x0=None):
    """Unpreconditioned CG.

    Returns ``(x, iterations, residual_norm, converged)`` and never raises on
    an exhausted iteration budget; see :func:`cg_solve` for the raising form.
    The stopping test is ``||b - m x|| <= rel_tol * ||b||`` on the recursively
    updated residual.
    """
    b = as_vector(b)
    if m.num_rows != m.num_cols or len(b) != m.num_rows:
        raise InvalidArgumentError("cg dimension mismatch")
    if rel_tol <= 0:
        raise InvalidArgumentError("rel_tol must be positive")
    if x0 is None:
        x = np.zeros_like(b)
        r = b.copy()
    else:
        x = as_vector(x0).copy()
        r = b - spmv(m, x)
    target = rel_tol * norm2(b)
    rr = float(np.dot(r, r))
    if np.sqrt(rr) <= target:
        return x, 0, float(np.sqrt(rr)), True
    p = r.copy()
    for it in range(1, max_iters + 1):
        ap = spmv(m, p)
        pap = float(np.dot(p, ap))
        if pap <= 0.0:
            raise NotSPDError("CG met a direction of non-positive curvature")
        alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = float(np.dot(r, r))
        if np.sqrt(rr_new) <= target:
            return x, it, float(np.sqrt(rr_new)), True
        p *= rr_new / rr
        p += r
        rr = rr_new
    return x, max_iters, float(np.sqrt(rr)), False


def cg_solve(m: CsrMatrix, b, rel_tol: float = 1e-10, max_iters: int = 1000, x0=None) -> np.ndarray:
    """Solve ``m x = b`` with CG to ``||m x - b|| <= rel_tol ||b||``.

    Raises :class:`IterationLimitError` (carrying the last iterate) when
    ``max_iters`` is exhausted.
    """
    x, its, res, ok = conjugate_gradient(m, b, rel_tol, max_iters, x0=x0)
    if not ok:
        raise IterationLimitError(
            f"CG did not reach rel_tol={rel_tol:g} in {its} iterations (residual {res:.3e})",
            iterate=x, residual_norm=res)
    return x
