"""Partitioning, overlap expansion and subdomain extraction.

A partition assigns every global index to exactly one owning subdomain. The
overlap of a subdomain is every index reachable from its owned set within
``gamma`` hops of the matrix graph. Indices outside owned+overlap that still
couple into local rows are ghosts; their values come from the owning
subdomain at run time through the interface matrix.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .problem import GridSpec
from .sparse import CsrMatrix, as_vector

__all__ = [
    "SCHEMES",
    "PartitionMap",
    "OverlapSpec",
    "SubdomainProblem",
    "CommPattern",
    "ExchangePlan",
    "partition_regular1d",
    "partition_regular2d",
    "partition_rcb",
    "partition_external",
    "write_partition_file",
    "make_partition",
    "expand_overlap",
    "extract_subdomain",
    "extract_all",
    "comm_pattern",
    "exchange_plans",
]

SCHEMES = ("regular1d", "regular2d", "rcb", "external")


@dataclass(eq=False)
class PartitionMap:
    owner: np.ndarray
    num_subdomains: int
    scheme: str

    def __post_init__(self):
        self.owner = np.array(self.owner, dtype=np.int64)
        self.num_subdomains = int(self.num_subdomains)
        if self.scheme not in SCHEMES:
            raise InvalidArgumentError(f"unknown partition scheme {self.scheme!r}")
        if self.num_subdomains < 1:
            raise InvalidArgumentError("need at least one subdomain")
        if self.owner.ndim != 1:
            raise InvalidArgumentError("owner must be 1-D")
        if len(self.owner) and (self.owner.min() < 0 or self.owner.max() >= self.num_subdomains):
            raise InvalidArgumentError("subdomain id out of range")
        sizes = self.sizes()
        if np.any(sizes == 0):
            empty = np.flatnonzero(sizes == 0).tolist()
            raise InvalidArgumentError(f"subdomains {empty} own no indices")
        self.owner.flags.writeable = False

    @property
    def n(self) -> int:
        return len(self.owner)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.num_subdomains)

    def owned(self, p: int) -> np.ndarray:
        return np.flatnonzero(self.owner == p)


@dataclass(frozen=True)
class OverlapSpec:
    gamma: int = 1

    def __post_init__(self):
        if int(self.gamma) < 0:
            raise InvalidArgumentError("overlap must be >= 0")


def _check_grid(n, grid):
    if not isinstance(grid, GridSpec):
        grid = GridSpec(int(grid))
    if n != grid.n:
        raise InvalidArgumentError(f"grid of {grid.n} points does not match n={n}")
    return grid


def _block_bounds(length, parts):
    # earlier blocks take the remainder
    sizes = np.full(parts, length // parts)
    sizes[: length % parts] += 1
    return np.concatenate(([0], np.cumsum(sizes)))


def partition_regular1d(n: int, grid: GridSpec, p: int) -> PartitionMap:
    """Contiguous bands of whole grid rows."""
    grid = _check_grid(n, grid)
    N = grid.points_per_side
    if not 1 <= p <= N:
        raise InvalidArgumentError(f"regular1d needs 1 <= P <= {N}, got P={p}")
    bounds = _block_bounds(N, p)
    rows, _ = grid.coords()
    owner = np.searchsorted(bounds, rows, side="right") - 1
    return PartitionMap(owner, p, "regular1d")


def _near_square_factors(p):
    px = int(np.floor(np.sqrt(p)))
    while p % px:
        px -= 1
    return px, p // px


def partition_regular2d(n: int, grid: GridSpec, p: int) -> PartitionMap:
    """Rectangular tiles, ``px`` bands of rows by ``py`` bands of columns.

    ``px <= py`` is the factor pair of ``p`` closest to square; tile ids are
    row-major over the tile grid.
    """
    grid = _check_grid(n, grid)
    N = grid.points_per_side
    if p < 1:
        raise InvalidArgumentError("P must be >= 1")
    px, py = _near_square_factors(p)
    if px > N or py > N:
        raise InvalidArgumentError(
            f"regular2d cannot tile a {N}x{N} grid into {px}x{py} subdomains (P={p})")
    rows, cols = grid.coords()
    bx = np.searchsorted(_block_bounds(N, px), rows, side="right") - 1
    by = np.searchsorted(_block_bounds(N, py), cols, side="right") - 1
    return PartitionMap(bx * py + by, p, "regular2d")


def partition_rcb(m: CsrMatrix | None, grid: GridSpec, p: int) -> PartitionMap:
    """Recursive coordinate bisection on grid coordinates.

    Each cut goes across the longer extent of the current point set (rows on
    ties). For power-of-two ``p`` every cut is a median split; otherwise the
    parts are split ``p // 2`` : ``p - p // 2`` with proportional point
    counts, so any ``p`` up to ``n`` is accepted.
    """
    n = grid.n if m is None else m.num_rows
    grid = _check_grid(n, grid)
    if not 1 <= p <= n:
        raise InvalidArgumentError(f"rcb needs 1 <= P <= n, got P={p}")
    rows, cols = grid.coords()
    owner = np.empty(n, dtype=np.int64)

    def bisect(idx, parts, first_id):
        if parts == 1:
            owner[idx] = first_id
            return
        r, c = rows[idx], cols[idx]
        if np.ptp(r) >= np.ptp(c):
            order = np.lexsort((c, r))
        else:
            order = np.lexsort((r, c))
        left_parts = parts // 2
        cut = (len(idx) * left_parts) // parts
        idx = idx[order]
        bisect(idx[:cut], left_parts, first_id)
        bisect(idx[cut:], parts - left_parts, first_id + left_parts)

    bisect(np.arange(n), p, 0)
    return PartitionMap(owner, p, "rcb")


def partition_external(path, p: int, n: int) -> PartitionMap:
    """Read an owner-per-line partition file (METIS ``part`` output layout)."""
    path = Path(path)
    owner = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                raise FormatError("blank line", line=lineno, path=path)
            try:
                v = int(text)
            except ValueError:
                raise FormatError(f"not an integer: {text!r}", line=lineno, path=path) from None
            if not 0 <= v < p:
                raise FormatError(f"subdomain id {v} outside [0, {p})", line=lineno, path=path)
            owner.append(v)
    if len(owner) != n:
        raise FormatError(f"expected {n} lines, found {len(owner)}", line=len(owner), path=path)
    return PartitionMap(np.array(owner, dtype=np.int64), p, "external")


def write_partition_file(pm: PartitionMap, path) -> None:
    Path(path).write_text("".join(f"{v}\n" for v in pm.owner.tolist()))


def make_partition(scheme, matrix, grid, p, partition_file=None) -> PartitionMap:
    """Dispatch on the scheme name used by the CLI."""
    n = matrix.num_rows
    if scheme == "external":
        if partition_file is None:
            raise InvalidArgumentError("external partitioning needs a partition file")
        return partition_external(partition_file, p, n)
    if grid is None:
        raise InvalidArgumentError(f"{scheme} partitioning needs grid coordinates")
    if scheme == "regular1d":
        return partition_regular1d(n, grid, p)
    if scheme == "regular2d":
        return partition_regular2d(n, grid, p)
    if scheme == "rcb":
        return partition_rcb(matrix, grid, p)
    raise InvalidArgumentError(f"unknown partition scheme {scheme!r}")


def expand_overlap(m: CsrMatrix, pm: PartitionMap, spec: OverlapSpec | int) -> list[np.ndarray]:
    """Overlap index set of every subdomain (sorted global indices).

    Layer k holds indices first reached after k hops along row -> column
    edges of ``m``.
    """
    gamma = spec.gamma if isinstance(spec, OverlapSpec) else OverlapSpec(int(spec)).gamma
    if m.num_rows != m.num_cols:
        raise InvalidArgumentError("overlap expansion needs a square matrix")
    if m.num_rows != pm.n:
        raise InvalidArgumentError("partition does not match matrix size")
    out = []
    for p in range(pm.num_subdomains):
        owned = pm.owner == p
        reached = owned.copy()
        frontier = owned
        for _ in range(gamma):
            step = np.zeros(m.num_rows, dtype=bool)
            step[m.col_idxs[frontier[m.row_ids]]] = True
            step &= ~reached
            if not step.any():
                break
            reached |= step
            frontier = step
        out.append(np.flatnonzero(reached & ~owned))
    return out


@dataclass(eq=False)
class SubdomainProblem:
    """Local system of one subdomain.

    Local unknowns are the owned and overlap indices in increasing global
    order. ``interface_matrix`` has one column per ghost, in
    ``ghost_to_global`` order, so the local rows of ``A`` are reproduced by
    ``local_matrix @ x_local + interface_matrix @ ghost_values``.
    """

    subdomain_id: int
    local_matrix: CsrMatrix
    interface_matrix: CsrMatrix
    local_to_global: np.ndarray
    ghost_to_global: np.ndarray
    owned_mask: np.ndarray
    local_rhs: np.ndarray

    @property
    def num_local(self) -> int:
        return len(self.local_to_global)

    @property
    def num_ghosts(self) -> int:
        return len(self.ghost_to_global)

    @property
    def owned_global(self) -> np.ndarray:
        return self.local_to_global[self.owned_mask]


def extract_subdomain(m: CsrMatrix, b, pm: PartitionMap, overlaps, p: int) -> SubdomainProblem:
    b = as_vector(b)
    n = m.num_rows
    in_local = pm.owner == p
    in_local[overlaps[p]] = True
    local = np.flatnonzero(in_local)
    g2l = np.full(n, -1, dtype=np.int64)
    g2l[local] = np.arange(len(local))

    sel = in_local[m.row_ids]
    rows = g2l[m.row_ids[sel]]
    cols = m.col_idxs[sel]
    vals = m.values[sel]
    is_local_col = in_local[cols]

    ghosts = np.unique(cols[~is_local_col])
    gh2l = np.full(n, -1, dtype=np.int64)
    gh2l[ghosts] = np.arange(len(ghosts))

    k = len(local)
    local_matrix = CsrMatrix.from_coo(k, k, rows[is_local_col], g2l[cols[is_local_col]],
                                      vals[is_local_col], sum_duplicates=False)
    interface = CsrMatrix.from_coo(k, len(ghosts), rows[~is_local_col], gh2l[cols[~is_local_col]],
                                   vals[~is_local_col], sum_duplicates=False)
    owned_mask = pm.owner[local] == p
    return SubdomainProblem(p, local_matrix, interface, local, ghosts, owned_mask, b[local].copy())


def extract_all(m: CsrMatrix, b, pm: PartitionMap, gamma) -> list[SubdomainProblem]:
    overlaps = expand_overlap(m, pm, gamma)
    return [extract_subdomain(m, b, pm, overlaps, p) for p in range(pm.num_subdomains)]


@dataclass(eq=False)
class CommPattern:
    """``counts[p, q]``: number of ghost values subdomain ``p`` receives from ``q``."""

    counts: np.ndarray
    _adjacency: list = field(init=False, repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        P = self.num_subdomains
        links = (self.counts > 0) | (self.counts.T > 0)
        self._adjacency = [np.flatnonzero(links[p]).tolist() for p in range(P)]

    @property
    def num_subdomains(self) -> int:
        return self.counts.shape[0]

    def sources(self, p) -> list[int]:
        """Subdomains ``p`` receives ghost values from."""
        return np.flatnonzero(self.counts[p] > 0).tolist()

    def neighbors(self, p) -> list[int]:
        """Subdomains linked to ``p`` in either direction."""
        return self._adjacency[p]

    def hop_distances(self, src) -> np.ndarray:
        """Graph distance from ``src`` over the undirected neighbour graph (-1 if unreachable)."""
        dist = np.full(self.num_subdomains, -1, dtype=np.int64)
        dist[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in self._adjacency[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    def is_connected(self) -> bool:
        return bool(np.all(self.hop_distances(0) >= 0))

    def diameter(self) -> int:
        """Longest shortest path; raises if the graph is disconnected."""
        best = 0
        for p in range(self.num_subdomains):
            d = self.hop_distances(p)
            if np.any(d < 0):
                raise InvalidArgumentError("subdomain graph is disconnected")
            best = max(best, int(d.max()))
        return best

    def to_csv(self, path) -> None:
        lines = [",".join(str(int(v)) for v in row) for row in self.counts]
        Path(path).write_text("\n".join(lines) + "\n")


def _owner_from_subproblems(subproblems) -> np.ndarray:
    n = sum(int(sp.owned_mask.sum()) for sp in subproblems)
    owner = np.full(n, -1, dtype=np.int64)
    for sp in subproblems:
        owner[sp.owned_global] = sp.subdomain_id
    if np.any(owner < 0):
        raise InvalidArgumentError("subproblems do not cover every global index")
    return owner


def comm_pattern(subproblems) -> CommPattern:
    P = len(subproblems)
    owner = _owner_from_subproblems(subproblems)
    counts = np.zeros((P, P), dtype=np.int64)
    for sp in subproblems:
        if sp.num_ghosts:
            counts[sp.subdomain_id] = np.bincount(owner[sp.ghost_to_global], minlength=P)
    return CommPattern(counts)


@dataclass(eq=False)
class ExchangePlan:
    """Pack/unpack index maps of one subdomain.

    The payload from ``q`` to ``p`` holds ``q``'s current values for every
    index ``p`` uses but ``q`` owns: first ``p``'s ghosts (in ghost order),
    then ``p``'s overlap entries (in local order).

    ``recv_positions[q]``: positions in the ghost array filled from ``q``.
    ``recv_overlap[q]``: local positions of overlap entries owned by ``q``.
    ``send_indices[q]``: local indices whose values form the payload sent
    to ``q``, already in the receiver's layout.
    """

    subdomain_id: int
    recv_positions: dict[int, np.ndarray]
    recv_overlap: dict[int, np.ndarray]
    send_indices: dict[int, np.ndarray]

    @property
    def recv_from(self) -> list[int]:
        return sorted(set(self.recv_positions) | set(self.recv_overlap))

    @property
    def send_to(self) -> list[int]:
        return sorted(self.send_indices)

    @property
    def neighbors(self) -> list[int]:
        return sorted(set(self.recv_from) | set(self.send_indices))

    def payload_length(self, q: int) -> int:
        return len(self.recv_positions.get(q, ())) + len(self.recv_overlap.get(q, ()))

    def split(self, q: int, payload):
        """(ghost part, overlap part) of a payload received from ``q``."""
        k = len(self.recv_positions.get(q, ()))
        return payload[:k], payload[k:]


_EMPTY = np.zeros(0, dtype=np.int64)


def exchange_plans(subproblems) -> list[ExchangePlan]:
    owner = _owner_from_subproblems(subproblems)
    n = len(owner)
    g2l = []
    for sp in subproblems:
        m = np.full(n, -1, dtype=np.int64)
        m[sp.local_to_global] = np.arange(sp.num_local)
        g2l.append(m)
    plans = [ExchangePlan(sp.subdomain_id, {}, {}, {}) for sp in subproblems]
    for sp in subproblems:
        p = sp.subdomain_id
        ghost_src = owner[sp.ghost_to_global]
        ovl_pos = np.flatnonzero(~sp.owned_mask)
        ovl_src = owner[sp.local_to_global[ovl_pos]]
        for q in np.union1d(ghost_src, ovl_src).tolist():
            gpos = np.flatnonzero(ghost_src == q)
            opos = ovl_pos[ovl_src == q]
            if len(gpos):
                plans[p].recv_positions[q] = gpos
            if len(opos):
                plans[p].recv_overlap[q] = opos
            wanted = np.concatenate((sp.ghost_to_global[gpos], sp.local_to_global[opos]))
            plans[q].send_indices[p] = g2l[q][wanted] if len(wanted) else _EMPTY
    return plans
