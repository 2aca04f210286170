"""Local convergence tests, termination detection and global verification.

Detectors are small state-free objects; everything a subdomain publishes goes
through a flag board (see :mod:`ras_testbed.transport`). With a plain
:class:`~ras_testbed.transport.FlagBoard` posts are visible immediately
(asynchronous mode); with a :class:`~ras_testbed.transport.RoundFlagBoard` they
become visible at the end of a round (lock-step mode and the deterministic
scheduler).

Both protocols let a subdomain retract its convergence flag until a
termination/global flag is posted; that flag is sticky.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError
from .sparse import CsrMatrix, norm2, spmv
from .transport import FlagBoard, RoundFlagBoard

__all__ = [
    "LocalConvergenceState",
    "DetectorConfig",
    "CentralizedTreeDetector",
    "DecentralizedDetector",
    "make_detector",
    "check_local",
    "local_residual",
    "verify_global",
    "VerificationResult",
    "RoundTrace",
    "run_rounds",
    "run_script",
]


@dataclass(frozen=True)
class LocalConvergenceState:
    locally_converged: bool
    local_residual_norm_sq: float
    local_rhs_norm_sq: float
    tolerance: float

    @classmethod
    def evaluate(cls, residual_norm_sq, rhs_norm_sq, tau):
        if rhs_norm_sq == 0.0:
            ok = residual_norm_sq == 0.0
        else:
            ok = residual_norm_sq < tau * tau * rhs_norm_sq
        return cls(bool(ok), float(residual_norm_sq), float(rhs_norm_sq), float(tau))

    @classmethod
    def scripted(cls, converged: bool, tau: float = 1e-7):
        """State carrying only a verdict, for driving protocols in tests."""
        return cls(bool(converged), 0.0 if converged else 1.0, 1.0, tau)


def local_residual(local_matrix: CsrMatrix, interface_matrix: CsrMatrix, x_local,
                   ghost_values, local_rhs) -> np.ndarray:
    r = local_rhs - spmv(local_matrix, x_local)
    if interface_matrix.num_cols:
        r -= spmv(interface_matrix, ghost_values)
    return r


def check_local(local_matrix, interface_matrix, x_local, ghost_values, local_rhs,
                tau) -> LocalConvergenceState:
    """``||r_p||^2 < tau^2 ||b_p||^2`` over all local rows, overlap included.

    A zero local right-hand side counts as converged only for a zero residual.
    """
    r = local_residual(local_matrix, interface_matrix, x_local, ghost_values, local_rhs)
    return LocalConvergenceState.evaluate(float(np.dot(r, r)), float(np.dot(local_rhs, local_rhs)), tau)


@dataclass(frozen=True)
class DetectorConfig:
    mode: str = "decentralized"
    arity: int = 2

    def __post_init__(self):
        if self.mode not in ("centralized", "decentralized"):
            raise InvalidArgumentError(f"unknown detector mode {self.mode!r}")
        if self.arity < 2:
            raise InvalidArgumentError("tree arity must be >= 2")


class CentralizedTreeDetector:
    """Root/leaf detection over a complete ``arity``-ary tree rooted at 0.

    A node's flag means "I and my whole subtree are converged". The root
    turns an all-converged subtree into termination, which then travels down
    one level per round.
    """

    def __init__(self, num_subdomains: int, arity: int = 2):
        if num_subdomains < 1:
            raise InvalidArgumentError("need at least one subdomain")
        if arity < 2:
            raise InvalidArgumentError("tree arity must be >= 2")
        self.num_subdomains = num_subdomains
        self.arity = arity

    def parent(self, p: int) -> int | None:
        return None if p == 0 else (p - 1) // self.arity

    def children(self, p: int) -> list[int]:
        first = self.arity * p + 1
        return list(range(first, min(first + self.arity, self.num_subdomains)))

    def depth(self, p: int) -> int:
        d = 0
        while p:
            p = (p - 1) // self.arity
            d += 1
        return d

    @property
    def height(self) -> int:
        return self.depth(self.num_subdomains - 1)

    @property
    def round_bound(self) -> int:
        """Rounds from "everyone converged" to "everyone terminated" with round visibility."""
        return 2 * self.height + 1

    def distance(self, a: int, b: int) -> int:
        """Hops between two tree nodes."""
        da, db = self.depth(a), self.depth(b)
        hops = 0
        while a != b:
            if da >= db:
                a, da = (a - 1) // self.arity, da - 1
            else:
                b, db = (b - 1) // self.arity, db - 1
            hops += 1
        return hops

    def step(self, me: int, state: LocalConvergenceState, board: FlagBoard) -> bool:
        if board.is_global(me):
            return True
        parent = self.parent(me)
        if parent is not None and board.is_global(parent):
            board.post_global(me)
            return True
        subtree = state.locally_converged and all(board.converged(c) > 0 for c in self.children(me))
        board.post_converged(me, 1 if subtree else 0)
        if parent is None and subtree:
            board.post_global(me)
            return True
        return False


class DecentralizedDetector:
    """Neighbour-only detection.

    Each subdomain publishes a convergence radius: 0 when it is not converged,
    otherwise one more than the smallest radius published by its neighbours.
    Radius ``k`` certifies that every subdomain within ``k - 1`` hops reported
    convergence, so once a subdomain reaches ``diameter + 1`` it posts the
    global flag. A subdomain that sees a neighbour's global flag posts its own
    and stops, which floods termination through the graph.
    """

    def __init__(self, neighbors: list[list[int]], diameter: int | None = None):
        self.neighbors = [sorted(set(ns)) for ns in neighbors]
        self.num_subdomains = len(self.neighbors)
        if diameter is None:
            diameter = _diameter(self.neighbors)
        self.diameter = diameter
        self.target = diameter + 1

    @property
    def round_bound(self) -> int:
        return self.diameter + 1

    def distance(self, a: int, b: int) -> int:
        return int(_bfs(self.neighbors, a)[b])

    def step(self, me: int, state: LocalConvergenceState, board: FlagBoard) -> bool:
        if board.is_global(me):
            return True
        ns = self.neighbors[me]
        if any(board.is_global(q) for q in ns):
            board.post_global(me)
            return True
        if not state.locally_converged:
            radius = 0
        else:
            radius = min(self.target, 1 + min((board.converged(q) for q in ns), default=self.target))
        board.post_converged(me, radius)
        if radius >= self.target:
            board.post_global(me)
            return True
        return False


def _bfs(adj, src):
    dist = np.full(len(adj), -1, dtype=np.int64)
    dist[src] = 0
    frontier = [src]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def _diameter(adj) -> int:
    best = 0
    for p in range(len(adj)):
        d = _bfs(adj, p)
        if np.any(d < 0):
            raise InvalidArgumentError(
                "decentralized detection needs a connected subdomain graph; use centralized")
        best = max(best, int(d.max()))
    return best


def make_detector(config: DetectorConfig, neighbors):
    """Build the configured detector.

    ``neighbors`` is either a per-subdomain list of neighbour ids or anything
    with ``num_subdomains`` and ``neighbors(p)`` (such as a ``CommPattern``).
    """
    if hasattr(neighbors, "neighbors"):
        neighbors = [neighbors.neighbors(p) for p in range(neighbors.num_subdomains)]
    if config.mode == "centralized":
        return CentralizedTreeDetector(len(neighbors), config.arity)
    return DecentralizedDetector(neighbors)


@dataclass(frozen=True)
class VerificationResult:
    verified: bool
    residual_norm: float
    rhs_norm: float

    @property
    def relative_residual(self) -> float:
        return self.residual_norm / self.rhs_norm if self.rhs_norm else self.residual_norm


def verify_global(A: CsrMatrix, x_global, b, tau: float) -> VerificationResult:
    """``||b - A x|| < tau ||b||`` (a zero ``b`` needs an exactly zero residual)."""
    r = np.asarray(b, dtype=np.float64) - spmv(A, x_global)
    rn, bn = norm2(r), norm2(b)
    ok = rn == 0.0 if bn == 0.0 else rn < tau * bn
    return VerificationResult(bool(ok), rn, bn)


@dataclass
class RoundTrace:
    """Outcome of a scheduler run.

    ``terminated_round[p]`` is the 1-based round in which ``p`` first returned
    terminate (None if never). ``states[r][p]`` is what ``p`` reported in round
    ``r + 1`` (None once terminated).
    """

    terminated_round: list
    states: list = field(default_factory=list)
    first_global_round: int | None = None
    first_global_node: int | None = None

    @property
    def all_terminated(self) -> bool:
        return all(r is not None for r in self.terminated_round)

    @property
    def last_round(self):
        return max(self.terminated_round) if self.all_terminated else None


def run_rounds(detector, schedule: Callable[[int, int], bool], max_rounds: int,
               order=None, board: FlagBoard | None = None) -> RoundTrace:
    """Drive ``detector`` in rounds on a single thread.

    ``schedule(round, p)`` gives ``p``'s local verdict for a 1-based round.
    With the default :class:`RoundFlagBoard` every round sees only what was
    posted in earlier rounds, which is exactly the lock-step solver's
    behaviour. Pass a plain :class:`FlagBoard` for immediate visibility, in
    which case ``order`` fixes the stepping order inside a round.
    """
    P = detector.num_subdomains
    board = RoundFlagBoard(P) if board is None else board
    order = list(range(P)) if order is None else list(order)
    trace = RoundTrace([None] * P)
    for rnd in range(1, max_rounds + 1):
        reported = [None] * P
        for p in order:
            if trace.terminated_round[p] is not None:
                continue
            conv = bool(schedule(rnd, p))
            reported[p] = conv
            before = board.is_global(p)
            if detector.step(p, LocalConvergenceState.scripted(conv), board):
                trace.terminated_round[p] = rnd
                if trace.first_global_round is None and not before:
                    trace.first_global_round = rnd
                    trace.first_global_node = p
        trace.states.append(reported)
        if isinstance(board, RoundFlagBoard):
            board.commit()
        if trace.all_terminated:
            break
    return trace


def run_script(detector, steps, board: FlagBoard | None = None) -> list[tuple[int, bool, bool]]:
    """Execute an explicit interleaving ``[(p, converged), ...]`` with immediate visibility.

    Returns ``(p, converged, terminated)`` per step; steps of already
    terminated subdomains are still executed (they return terminate again).
    """
    board = FlagBoard(detector.num_subdomains) if board is None else board
    out = []
    for p, conv in steps:
        term = detector.step(p, LocalConvergenceState.scripted(conv), board)
        out.append((p, bool(conv), bool(term)))
    return out
