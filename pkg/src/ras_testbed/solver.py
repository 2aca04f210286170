"""Synchronous and asynchronous Restricted Additive Schwarz.

One worker thread per subdomain repeats: local solve with the current ghost
values folded into the right-hand side, boundary exchange, convergence
check. In lock-step mode the exchange is a tagged rendezvous and detection
flags become visible once per iteration at a round barrier, so a run is
bitwise reproducible. In asynchronous mode workers put into each other's
windows and never wait.

At the end the owner of every index contributes its value to the global
solution; overlap copies are dropped.
"""
from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .convergence import (
    DetectorConfig,
    LocalConvergenceState,
    check_local,
    make_detector,
    verify_global,
)
from .errors import (
    BrokenRendezvousError,
    InvalidArgumentError,
    NoConvergenceError,
    NotSPDError,
    VerificationFailedError,
)
from .metrics import PHASES, RunMetrics
from .partition import (
    CommPattern,
    ExchangePlan,
    PartitionMap,
    SubdomainProblem,
    comm_pattern,
    exchange_plans,
    extract_all,
)
from .problem import LinearSystem
from .sparse import CholeskyFactor, cholesky_factorize, cholesky_solve, conjugate_gradient, spmv
from .transport import InProcessTransport, RoundFlagBoard

log = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "SubdomainRuntime",
    "SchwarzSetup",
    "GlobalSolution",
    "setup",
    "reset",
    "local_iterate",
    "gather",
    "run_sync",
    "run_async",
    "run_sync_reference",
    "solve",
]


@dataclass(frozen=True)
class SolverConfig:
    """Solver knobs.

    ``max_iter`` bounds lock-step iterations in sync mode and local solves
    per subdomain in async mode. ``require_fresh_ghosts`` (async only): a
    subdomain only switches to "converged" after data newer than its last
    solve arrived from every neighbour. ``skip_stale_solves`` (async only)
    skips a local solve when no ghost slot changed since the previous one.
    ``confirm_checks`` (async only): consecutive fresh converged checks a
    subdomain needs before it reports "converged" to the detector. Values
    above 1 narrow the window in which a neighbour's late update can undo a
    convergence report the detector has already counted.
    """

    mode: str = "sync"
    local_solver: str = "direct"
    cg_rel_tol: float = 1e-10
    cg_max_iters: int = 5000
    tau: float = 1e-7
    max_iter: int = 10000
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: int = 0
    require_fresh_ghosts: bool = True
    skip_stale_solves: bool = False
    confirm_checks: int = 2
    exchange_timeout: float = 120.0
    record_trace: bool = False

    def __post_init__(self):
        if self.mode not in ("sync", "async"):
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")
        if self.local_solver not in ("direct", "cg"):
            raise InvalidArgumentError(f"unknown local solver {self.local_solver!r}")
        if not self.tau > 0:
            raise InvalidArgumentError("tau must be positive")
        if not self.cg_rel_tol > 0:
            raise InvalidArgumentError("cg_rel_tol must be positive")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be >= 1")
        if self.confirm_checks < 1:
            raise InvalidArgumentError("confirm_checks must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class SubdomainRuntime:
    problem: SubdomainProblem
    plan: ExchangePlan
    factor: CholeskyFactor | None
    x_local: np.ndarray
    ghost_values: np.ndarray
    # current global iterate on the local indices: own values where owned,
    # the owners' latest values on the overlap
    owner_view: np.ndarray
    update_count: int = 0
    phase_timers: dict[str, float] = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))
    cg_failures: int = 0
    trace: list[str] = field(default_factory=list)

    @property
    def subdomain_id(self) -> int:
        return self.problem.subdomain_id


class SchwarzSetup(list):
    """List of :class:`SubdomainRuntime` plus the shared setup data."""

    def __init__(self, runtimes, system: LinearSystem, partition: PartitionMap,
                 gamma: int, pattern: CommPattern):
        super().__init__(runtimes)
        self.system = system
        self.partition = partition
        self.gamma = gamma
        self.pattern = pattern


@dataclass(eq=False)
class GlobalSolution:
    x: np.ndarray
    contributor: np.ndarray


def setup(system: LinearSystem, pm: PartitionMap, gamma: int, config: SolverConfig) -> SchwarzSetup:
    """Extract subdomains, build exchange plans and factor local matrices once."""
    A = system.matrix
    if pm.n != A.num_rows:
        raise InvalidArgumentError("partition does not match the system size")
    subproblems = extract_all(A, system.rhs, pm, gamma)
    plans = exchange_plans(subproblems)
    runtimes = []
    for sp, plan in zip(subproblems, plans):
        factor = None
        if config.local_solver == "direct":
            try:
                factor = cholesky_factorize(sp.local_matrix)
            except (NotSPDError, InvalidArgumentError) as exc:
                raise NotSPDError(f"local matrix of subdomain {sp.subdomain_id}: {exc}",
                                  subdomain=sp.subdomain_id) from None
        runtimes.append(SubdomainRuntime(sp, plan, factor, np.zeros(sp.num_local),
                                         np.zeros(sp.num_ghosts), np.zeros(sp.num_local)))
    return SchwarzSetup(runtimes, system, pm, int(gamma), comm_pattern(subproblems))


def reset(runtimes, x_global=None) -> None:
    """Clear run state; optionally start from ``x_global`` (local and ghost values alike)."""
    for rt in runtimes:
        sp = rt.problem
        if x_global is None:
            rt.x_local = np.zeros(sp.num_local)
            rt.ghost_values = np.zeros(sp.num_ghosts)
        else:
            rt.x_local = np.array(x_global[sp.local_to_global], dtype=np.float64)
            rt.ghost_values = np.array(x_global[sp.ghost_to_global], dtype=np.float64)
        rt.owner_view = rt.x_local.copy()
        rt.update_count = 0
        rt.phase_timers = dict.fromkeys(PHASES, 0.0)
        rt.cg_failures = 0
        rt.trace = []


def _digest(x: np.ndarray) -> str:
    return hashlib.blake2b(x.tobytes(), digest_size=16).hexdigest()


def local_iterate(rt: SubdomainRuntime, config: SolverConfig) -> np.ndarray:
    """One local solve: ``x_local = A_p^{-1} (b_p - interface @ ghosts)``."""
    sp = rt.problem
    rhs = sp.local_rhs
    if sp.num_ghosts:
        rhs = rhs - spmv(sp.interface_matrix, rt.ghost_values)
    if config.local_solver == "direct":
        x = cholesky_solve(rt.factor, rhs)
    else:
        x, _, _, ok = conjugate_gradient(sp.local_matrix, rhs, config.cg_rel_tol,
                                         config.cg_max_iters, x0=rt.x_local)
        if not ok:
            rt.cg_failures += 1
    rt.x_local = x
    rt.owner_view[sp.owned_mask] = x[sp.owned_mask]
    rt.update_count += 1
    if config.record_trace:
        rt.trace.append(_digest(x))
    return x


def gather(runtimes, pm: PartitionMap | None = None) -> GlobalSolution:
    """Owner values only; overlap copies are discarded."""
    n = sum(int(rt.problem.owned_mask.sum()) for rt in runtimes)
    x = np.zeros(n)
    contributor = np.full(n, -1, dtype=np.int64)
    for rt in runtimes:
        sp = rt.problem
        idx = sp.owned_global
        x[idx] = rt.x_local[sp.owned_mask]
        contributor[idx] = sp.subdomain_id
    if pm is not None and not np.array_equal(contributor, pm.owner):
        raise InvalidArgumentError("gathered contributors disagree with the partition")
    return GlobalSolution(x, contributor)


def _check_state(rt: SubdomainRuntime, tau: float) -> LocalConvergenceState:
    # residual of the current global iterate on the local rows: overlap
    # entries carry the owners' values, not this subdomain's own copies
    sp = rt.problem
    return check_local(sp.local_matrix, sp.interface_matrix, rt.owner_view, rt.ghost_values,
                       sp.local_rhs, tau)


def _pack(rt: SubdomainRuntime) -> dict[int, np.ndarray]:
    return {q: rt.x_local[idx] for q, idx in rt.plan.send_indices.items()}


def _unpack(rt: SubdomainRuntime, q: int, payload) -> None:
    ghosts, overlap = rt.plan.split(q, payload)
    if len(ghosts):
        rt.ghost_values[rt.plan.recv_positions[q]] = ghosts
    if len(overlap):
        rt.owner_view[rt.plan.recv_overlap[q]] = overlap


class _Clock:
    __slots__ = ("timers", "t")

    def __init__(self, timers):
        self.timers = timers
        self.t = time.perf_counter()

    def lap(self, phase):
        now = time.perf_counter()
        self.timers[phase] += now - self.t
        self.t = now


def _launch(runtimes, target, transport):
    """Run ``target(rt)`` on one thread per subdomain; returns ``(wall time, errors)``."""
    errors = []
    start = threading.Event()

    def wrapped(rt):
        try:
            start.wait()
            target(rt)
        except BaseException as exc:  # noqa: BLE001 - reported to the caller below
            errors.append((rt.subdomain_id, exc))
            transport.abort(f"subdomain {rt.subdomain_id} failed: {exc!r}")

    threads = [threading.Thread(target=wrapped, args=(rt,), name=f"ras-worker-{rt.subdomain_id}",
                                daemon=True) for rt in runtimes]
    for th in threads:
        th.start()
    t0 = time.perf_counter()
    start.set()
    for th in threads:
        th.join()
    wall = time.perf_counter() - t0
    return wall, errors


def _first_root_cause(errors):
    # peers of a failing worker die with BrokenRendezvousError; report the cause
    for p, exc in errors:
        if not isinstance(exc, BrokenRendezvousError):
            return p, exc
    return errors[0]


def _finish(runtimes, config, mode, wall, terminated, iterations, transport) -> tuple:
    system = runtimes.system
    sol = gather(runtimes, runtimes.partition)
    ver = verify_global(system.matrix, sol.x, system.rhs, config.tau)
    for rt in runtimes:
        accounted = sum(rt.phase_timers[ph] for ph in PHASES if ph != "other")
        rt.phase_timers["other"] = max(0.0, rt.phase_timers.get("_loop", accounted) - accounted)
        rt.phase_timers.pop("_loop", None)
    if any(rt.cg_failures for rt in runtimes):
        log.warning("cg hit its iteration limit in %d local solves",
                    sum(rt.cg_failures for rt in runtimes))
    flushes = []
    if transport is not None:
        flushes = [sum(w.flush_count.values()) for w in transport.windows]
    metrics = RunMetrics(
        mode=mode,
        num_subdomains=len(runtimes),
        time_to_solution=wall,
        update_counts=[rt.update_count for rt in runtimes],
        phase_timers=[dict(rt.phase_timers) for rt in runtimes],
        terminated=terminated,
        verified=ver.verified,
        residual_norm=ver.residual_norm,
        relative_residual=ver.relative_residual,
        iterations=iterations,
        cg_failures=[rt.cg_failures for rt in runtimes],
        flushes=flushes,
        config=config.to_dict(),
    )
    if not terminated:
        metrics.error = "max_iter reached without detected termination"
        raise NoConvergenceError(f"{mode} RAS: {metrics.error} (max_iter={config.max_iter})",
                                 solution=sol, metrics=metrics)
    if not ver.verified:
        metrics.error = f"verification failed: relative residual {ver.relative_residual:.3e}"
        raise VerificationFailedError(f"{mode} RAS terminated but {metrics.error}",
                                      residual_norm=ver.residual_norm, solution=sol, metrics=metrics)
    return sol, metrics


def _default_detector(runtimes, config, detector):
    if detector is not None:
        return detector
    return make_detector(config.detector, [rt.plan.neighbors for rt in runtimes])


def run_sync(runtimes: SchwarzSetup, config: SolverConfig, transport=None, detector=None):
    """Lock-step RAS: every subdomain performs the same number of iterations.

    Each iteration: local solve, tagged rendezvous exchange with all
    neighbours, local check and one detector step. Detection flags are
    committed at a round barrier; the loop ends in the first iteration after
    which every subdomain has terminated.
    """
    if transport is None:
        transport = InProcessTransport.from_plans([rt.plan for rt in runtimes],
                                                  timeout=config.exchange_timeout)
    detector = _default_detector(runtimes, config, detector)
    board = transport.round_flags
    outcome = {}

    def worker(rt):
        p = rt.subdomain_id
        loop_start = time.perf_counter()
        clock = _Clock(rt.phase_timers)
        for k in range(1, config.max_iter + 1):
            local_iterate(rt, config)
            clock.lap("local_solve")
            for q, payload in transport.exchange_sync(p, k, _pack(rt)).items():
                _unpack(rt, q, payload)
            clock.lap("boundary_exchange")
            detector.step(p, _check_state(rt, config.tau), board)
            transport.barrier(p)
            done = board.all_global()
            clock.lap("convergence_check")
            if done:
                outcome[p] = k
                break
        rt.phase_timers["_loop"] = time.perf_counter() - loop_start

    wall, errors = _launch(runtimes, worker, transport)
    if errors:
        p, exc = _first_root_cause(errors)
        raise exc
    counts = set(outcome.values())
    terminated = len(outcome) == len(runtimes)
    if terminated and len(counts) != 1:
        raise RuntimeError(f"lock-step violated: termination iterations {sorted(counts)}")
    iterations = counts.pop() if terminated else config.max_iter
    return _finish(runtimes, config, "sync", wall, terminated, iterations, transport)


def run_sync_reference(runtimes: SchwarzSetup, config: SolverConfig, detector=None):
    """Single-threaded lock-step RAS used as an oracle for :func:`run_sync`.

    Ghost values are taken from a globally assembled owner vector instead of
    packed messages; detector steps run in subdomain order against a
    round-committed flag board.
    """
    detector = _default_detector(runtimes, config, detector)
    board = RoundFlagBoard(len(runtimes))
    n = runtimes.system.n
    t0 = time.perf_counter()
    terminated = False
    k = 0
    for k in range(1, config.max_iter + 1):
        for rt in runtimes:
            local_iterate(rt, config)
        owner_x = np.zeros(n)
        for rt in runtimes:
            owner_x[rt.problem.owned_global] = rt.x_local[rt.problem.owned_mask]
        for rt in runtimes:
            rt.ghost_values = owner_x[rt.problem.ghost_to_global]
            rt.owner_view = owner_x[rt.problem.local_to_global]
        for rt in runtimes:
            detector.step(rt.subdomain_id, _check_state(rt, config.tau), board)
        board.commit()
        if board.all_global():
            terminated = True
            break
    wall = time.perf_counter() - t0
    return _finish(runtimes, config, "sync", wall, terminated, k, None)


def run_async(runtimes: SchwarzSetup, config: SolverConfig, transport=None, detector=None):
    """Asynchronous RAS over one-sided windows.

    Each worker loops on: local solve, put+flush its boundary values into
    every neighbour's window, read the latest payload of each neighbour, local
    check and one detector step. No worker ever waits for another; update
    counts may differ between subdomains.
    """
    if transport is None:
        transport = InProcessTransport.from_plans([rt.plan for rt in runtimes],
                                                  timeout=config.exchange_timeout)
    detector = _default_detector(runtimes, config, detector)
    board = transport.flags
    finished = {}

    def worker(rt):
        p = rt.subdomain_id
        sources = rt.plan.recv_from
        seen = {q: 0 for q in sources}
        used = dict(seen)
        converged = False
        streak = 0
        # nobody can invalidate an isolated subdomain's check
        needed = config.confirm_checks if sources else 1
        loop_start = time.perf_counter()
        clock = _Clock(rt.phase_timers)
        while not transport.aborted:
            stale = rt.update_count > 0 and all(seen[q] == used[q] for q in sources)
            if not (config.skip_stale_solves and stale):
                local_iterate(rt, config)
                used = dict(seen)
                clock.lap("local_solve")
                for q, payload in _pack(rt).items():
                    transport.put(q, p, payload)
                    transport.flush(q, p)
            for q in sources:
                payload, epoch = transport.read_latest(p, q)
                if epoch != seen[q]:
                    _unpack(rt, q, payload)
                    seen[q] = epoch
            clock.lap("boundary_exchange")
            state = _check_state(rt, config.tau)
            fresh = not config.require_fresh_ghosts or all(seen[q] != used[q] for q in sources)
            if not state.locally_converged:
                streak = 0
            elif fresh:
                streak += 1
            if state.locally_converged and not converged and streak < needed:
                state = replace(state, locally_converged=False)
            converged = state.locally_converged
            done = detector.step(p, state, board)
            clock.lap("convergence_check")
            if done:
                finished[p] = rt.update_count
                break
            if rt.update_count >= config.max_iter:
                transport.abort(f"subdomain {p} reached max_iter={config.max_iter}")
                break
            # release the GIL and the core; sleep(0) does not reliably do both
            os.sched_yield()
            clock.lap("other")
        rt.phase_timers["_loop"] = time.perf_counter() - loop_start

    wall, errors = _launch(runtimes, worker, transport)
    if errors:
        p, exc = _first_root_cause(errors)
        raise exc
    terminated = len(finished) == len(runtimes)
    iterations = max(rt.update_count for rt in runtimes)
    return _finish(runtimes, config, "async", wall, terminated, iterations, transport)


def solve(system: LinearSystem, pm: PartitionMap, gamma: int, config: SolverConfig):
    """Setup plus one run in the configured mode; returns ``(solution, metrics)``."""
    rts = setup(system, pm, gamma, config)
    if config.mode == "sync":
        return run_sync(rts, config)
    return run_async(rts, config)
