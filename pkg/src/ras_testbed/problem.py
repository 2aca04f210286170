"""Benchmark problem generation and Matrix Market I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .sparse import CsrMatrix

__all__ = [
    "GridSpec",
    "LinearSystem",
    "laplace_2d",
    "random_rhs",
    "read_matrix_market",
    "write_matrix_market",
]


@dataclass(frozen=True)
class GridSpec:
    """Square grid of ``points_per_side`` x ``points_per_side`` unknowns.

    Point (row r, column c) has global index ``r * N + c``.
    """

    points_per_side: int

    def __post_init__(self):
        if int(self.points_per_side) < 2:
            raise InvalidArgumentError("grid needs at least 2 points per side")

    @property
    def n(self) -> int:
        return self.points_per_side ** 2

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """(row, column) grid coordinates of every global index."""
        idx = np.arange(self.n)
        return idx // self.points_per_side, idx % self.points_per_side


@dataclass(frozen=True, eq=False)
class LinearSystem:
    matrix: CsrMatrix
    rhs: np.ndarray
    rhs_seed: int | None = None

    def __post_init__(self):
        if self.matrix.num_rows != self.matrix.num_cols:
            raise InvalidArgumentError("system matrix must be square")
        if len(self.rhs) != self.matrix.num_rows:
            raise InvalidArgumentError("rhs length does not match matrix")

    @property
    def n(self) -> int:
        return self.matrix.num_rows


def laplace_2d(spec: GridSpec | int) -> CsrMatrix:
    """Five-point Laplacian: 4 on the diagonal, -1 for each grid neighbour.

    The stencil is truncated at the grid edges (no wrap-around between grid
    rows), which is the usual Dirichlet treatment.
    """
    if not isinstance(spec, GridSpec):
        spec = GridSpec(int(spec))
    N = spec.points_per_side
    n = spec.n
    i = np.arange(n)
    c = i % N
    rows = [i]
    cols = [i]
    vals = [np.full(n, 4.0)]
    for off, mask in ((-N, i >= N), (-1, c != 0), (1, c != N - 1), (N, i < n - N)):
        src = i[mask]
        rows.append(src)
        cols.append(src + off)
        vals.append(np.full(len(src), -1.0))
    return CsrMatrix.from_coo(n, n, np.concatenate(rows), np.concatenate(cols),
                              np.concatenate(vals), sum_duplicates=False)


def random_rhs(n: int, seed: int) -> np.ndarray:
    """Entries i.i.d. uniform on [-1, 1], reproducible for a fixed seed."""
    if n < 1:
        raise InvalidArgumentError("rhs length must be >= 1")
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=n)


_FIELDS = {"real", "integer", "double"}
_SYMMETRIES = {"general", "symmetric"}


def read_matrix_market(path) -> CsrMatrix:
    """Read a square coordinate-format Matrix Market file.

    ``symmetric`` files store one triangle; it is mirrored to full storage.
    Indices are 1-based on disk.
    """
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty file", line=1, path=path)
    header = lines[0].split()
    if (len(header) != 5 or header[0].lower() != "%%matrixmarket"
            or header[1].lower() != "matrix" or header[2].lower() != "coordinate"):
        raise FormatError("expected '%%MatrixMarket matrix coordinate <field> <symmetry>'",
                          line=1, path=path)
    field_, symmetry = header[3].lower(), header[4].lower()
    if field_ not in _FIELDS:
        raise FormatError(f"unsupported field {field_!r}", line=1, path=path)
    if symmetry not in _SYMMETRIES:
        raise FormatError(f"unsupported symmetry {symmetry!r}", line=1, path=path)

    lineno = 1
    size = None
    for lineno in range(2, len(lines) + 1):
        text = lines[lineno - 1].strip()
        if not text or text.startswith("%"):
            continue
        parts = text.split()
        try:
            size = tuple(int(p) for p in parts)
        except ValueError:
            size = ()
        if len(size) != 3 or min(size) < 0:
            raise FormatError("size line must be 'rows cols nnz'", line=lineno, path=path)
        break
    if size is None:
        raise FormatError("missing size line", line=lineno + 1, path=path)
    nrows, ncols, nnz = size
    if nrows != ncols:
        raise InvalidArgumentError(f"{path}: matrix is {nrows}x{ncols}, expected square")

    rows = np.empty(nnz, dtype=np.int64)
    cols = np.empty(nnz, dtype=np.int64)
    vals = np.empty(nnz)
    k = 0
    for lineno in range(lineno + 1, len(lines) + 1):
        text = lines[lineno - 1].strip()
        if not text or text.startswith("%"):
            continue
        if k >= nnz:
            raise FormatError(f"more than the declared {nnz} entries", line=lineno, path=path)
        parts = text.split()
        if len(parts) != 3:
            raise FormatError("entry must be 'row col value'", line=lineno, path=path)
        try:
            r, c, v = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise FormatError(f"cannot parse entry {text!r}", line=lineno, path=path) from None
        if not (1 <= r <= nrows and 1 <= c <= ncols):
            raise FormatError(f"index ({r}, {c}) out of range", line=lineno, path=path)
        if symmetry == "symmetric" and c > r:
            raise FormatError("symmetric files must store the lower triangle", line=lineno, path=path)
        rows[k], cols[k], vals[k] = r - 1, c - 1, v
        k += 1
    if k != nnz:
        raise FormatError(f"declared {nnz} entries, found {k}", line=len(lines), path=path)

    if symmetry == "symmetric":
        off = rows != cols
        rows, cols, vals = (np.concatenate((rows, cols[off])), np.concatenate((cols, rows[off])),
                            np.concatenate((vals, vals[off])))
    return CsrMatrix.from_coo(nrows, ncols, rows, cols, vals)


def write_matrix_market(m: CsrMatrix, path) -> None:
    """Write ``m`` as a ``general`` coordinate file.

    Values use the shortest repr that round-trips, so reading the file back
    gives bit-identical values.
    """
    path = Path(path)
    out = [
        "%%MatrixMarket matrix coordinate real general",
        f"{m.num_rows} {m.num_cols} {m.nnz}",
    ]
    out.extend(f"{r + 1} {c + 1} {float(v)!r}"
               for r, c, v in zip(m.row_ids.tolist(), m.col_idxs.tolist(), m.values.tolist()))
    path.write_text("\n".join(out) + "\n")
