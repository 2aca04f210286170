"""Experiment configuration, repeated runs, output files and the command line.

A run directory holds ``run_XXX.json`` per run, ``metrics.csv`` (one row per
run and subdomain), ``aggregate.json`` and ``comm_pattern.csv`` (P x P
receive counts, row = receiver).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .convergence import DetectorConfig
from .errors import NoConvergenceError, RasError, VerificationFailedError
from .metrics import AggregateStats, RunMetrics, aggregate, export_comm_heatmap, export_metrics
from .partition import SCHEMES, make_partition
from .problem import GridSpec, LinearSystem, laplace_2d, random_rhs, read_matrix_market
from .solver import SolverConfig, reset, run_async, run_sync, setup

log = logging.getLogger(__name__)

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "build_system",
    "run_experiment",
    "compare_modes",
    "parse_cli",
    "main",
]


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce an experiment.

    ``grid_n`` and ``matrix_file`` are mutually exclusive; with neither the
    grid is 64 x 64. ``runs=None`` resolves to 1 for sync and 10 for async.
    """

    grid_n: int | None = None
    matrix_file: str | None = None
    rhs_seed: int = 0
    num_subdomains: int = 4
    partitioner: str = "rcb"
    partition_file: str | None = None
    gamma: int = 2
    solver: SolverConfig = field(default_factory=SolverConfig)
    runs: int | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.grid_n is not None and self.matrix_file is not None:
            raise ValueError("grid_n and matrix_file are mutually exclusive")
        if self.grid_n is None and self.matrix_file is None:
            object.__setattr__(self, "grid_n", 64)
        if self.partitioner not in SCHEMES:
            raise ValueError(f"unknown partitioner {self.partitioner!r}")
        if self.partitioner == "external" and self.partition_file is None:
            raise ValueError("the external partitioner needs a partition file")
        if self.num_subdomains < 1:
            raise ValueError("need at least one subdomain")
        if self.gamma < 0:
            raise ValueError("overlap must be >= 0")
        if self.runs is None:
            object.__setattr__(self, "runs", 1 if self.solver.mode == "sync" else 10)
        if self.runs < 1:
            raise ValueError("runs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RunMetrics]
    stats: AggregateStats
    files: dict[str, Path] = field(default_factory=dict)

    @property
    def all_verified(self) -> bool:
        return all(r.terminated and r.verified for r in self.records)


def build_system(cfg: ExperimentConfig) -> tuple[LinearSystem, GridSpec | None]:
    """The linear system plus grid coordinates when they exist.

    A matrix file whose size is a perfect square is given the matching grid
    so the geometric partitioners still apply.
    """
    if cfg.grid_n is not None:
        grid = GridSpec(cfg.grid_n)
        A = laplace_2d(grid)
    else:
        A = read_matrix_market(cfg.matrix_file)
        side = math.isqrt(A.num_rows)
        grid = GridSpec(side) if side >= 2 and side * side == A.num_rows else None
    return LinearSystem(A, random_rhs(A.num_rows, cfg.rhs_seed), cfg.rhs_seed), grid


def _failed_record(runtimes, mode, exc) -> RunMetrics:
    return RunMetrics(
        mode=mode,
        num_subdomains=len(runtimes),
        time_to_solution=float("nan"),
        update_counts=[rt.update_count for rt in runtimes],
        phase_timers=[dict(rt.phase_timers) for rt in runtimes],
        terminated=False,
        verified=False,
        residual_norm=float("nan"),
        relative_residual=float("nan"),
        iterations=max(rt.update_count for rt in runtimes),
        error=f"{type(exc).__name__}: {exc}",
    )


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run ``cfg.runs`` independent solves of one fixed system.

    Every run starts from zero with a fresh transport; only thread
    scheduling differs between runs. A failing run is recorded and the
    remaining runs still execute.
    """
    system, grid = build_system(cfg)
    pm = make_partition(cfg.partitioner, system.matrix, grid, cfg.num_subdomains, cfg.partition_file)
    runtimes = setup(system, pm, cfg.gamma, cfg.solver)
    run = run_sync if cfg.solver.mode == "sync" else run_async
    echo = cfg.to_dict()
    records = []
    for i in range(cfg.runs):
        reset(runtimes)
        try:
            _, rec = run(runtimes, cfg.solver)
        except (NoConvergenceError, VerificationFailedError) as exc:
            rec = exc.metrics
        except RasError as exc:
            rec = _failed_record(runtimes, cfg.solver.mode, exc)
        if rec.error:
            log.warning("run %d: %s", i, rec.error)
        rec.run_index = i
        rec.config = echo
        records.append(rec)
    stats = aggregate(records)
    files = {}
    if write and cfg.out_dir is not None:
        files = export_metrics(records, cfg.out_dir, stats)
        heat = Path(cfg.out_dir) / "comm_pattern.csv"
        export_comm_heatmap(runtimes.pattern, heat)
        files[heat.name] = heat
    return ExperimentResult(cfg, records, stats, files)


def compare_modes(cfg: ExperimentConfig, async_runs: int = 10) -> dict:
    """Sync and async on the same configuration, with the mean-time ratio.

    Output directories, if any, get ``sync/`` and ``async/`` subfolders.
    """
    out = {}
    for mode, runs in (("sync", 1), ("async", async_runs)):
        sub = None if cfg.out_dir is None else str(Path(cfg.out_dir) / mode)
        mcfg = replace(cfg, solver=replace(cfg.solver, mode=mode), runs=runs, out_dir=sub)
        out[mode] = run_experiment(mcfg)
    t_sync = out["sync"].stats.metrics["time_to_solution"]["mean"]
    t_async = out["async"].stats.metrics["time_to_solution"]["mean"]
    return {
        "sync": out["sync"],
        "async": out["async"],
        "sync_time": t_sync,
        "async_time": t_async,
        "speedup": t_sync / t_async if t_async > 0 else float("nan"),
    }


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ras-testbed",
        description="Synchronous and asynchronous restricted additive Schwarz experiments.",
    )
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--grid-n", type=int, help="points per side of the 2-D Laplace grid (default 64)")
    src.add_argument("--matrix-file", help="Matrix Market file with an SPD matrix")
    ap.add_argument("--rhs-seed", type=int, default=0)
    ap.add_argument("--subdomains", type=int, default=4)
    ap.add_argument("--partitioner", choices=SCHEMES, default="rcb")
    ap.add_argument("--partition-file")
    ap.add_argument("--overlap", type=int, default=2, help="overlap in graph layers")
    ap.add_argument("--local-solver", choices=("direct", "cg"), default="direct")
    ap.add_argument("--cg-tol", type=float, default=1e-10)
    ap.add_argument("--mode", choices=("sync", "async"), default="sync")
    ap.add_argument("--detector", choices=("centralized", "decentralized"), default="decentralized")
    ap.add_argument("--tolerance", type=float, default=1e-7)
    ap.add_argument("--max-iter", type=int, default=10000)
    ap.add_argument("--runs", type=int, help="default 1 for sync, 10 for async")
    ap.add_argument("--out-dir")
    ap.add_argument("--compare-modes", action="store_true",
                    help="run sync once and async --runs times, report the speedup")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def parse_cli(args=None) -> ExperimentConfig:
    """Map command-line flags to an :class:`ExperimentConfig`; bad input exits with status 2."""
    ap = _build_parser()
    ns = ap.parse_args(args)
    return _config_from_namespace(ap, ns)


def _config_from_namespace(ap, ns) -> ExperimentConfig:
    try:
        solver = SolverConfig(
            mode=ns.mode,
            local_solver=ns.local_solver,
            cg_rel_tol=ns.cg_tol,
            tau=ns.tolerance,
            max_iter=ns.max_iter,
            detector=DetectorConfig(ns.detector),
        )
        return ExperimentConfig(
            grid_n=ns.grid_n,
            matrix_file=ns.matrix_file,
            rhs_seed=ns.rhs_seed,
            num_subdomains=ns.subdomains,
            partitioner=ns.partitioner,
            partition_file=ns.partition_file,
            gamma=ns.overlap,
            solver=solver,
            runs=ns.runs,
            out_dir=ns.out_dir,
        )
    except ValueError as exc:
        ap.error(str(exc))


def _summary(res: ExperimentResult) -> dict:
    m = res.stats.metrics
    return {
        "mode": res.config.solver.mode,
        "runs": res.stats.runs,
        "failures": res.stats.failures,
        "unverified": res.stats.unverified,
        "time_to_solution": m["time_to_solution"],
        "iterations": m["iterations"],
        "relative_residual_max": m["relative_residual"]["max"],
        "update_spread": res.stats.update_spread,
        "files": sorted(res.files),
    }


def main(argv=None) -> int:
    ap = _build_parser()
    ns = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = _config_from_namespace(ap, ns)
    try:
        if ns.compare_modes:
            cmp = compare_modes(cfg, async_runs=ns.runs or 10)
            report = {
                "sync": _summary(cmp["sync"]),
                "async": _summary(cmp["async"]),
                "speedup": cmp["speedup"],
            }
            ok = cmp["sync"].all_verified and cmp["async"].all_verified
        else:
            res = run_experiment(cfg)
            report = _summary(res)
            ok = res.all_verified
    except (RasError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(report, indent=2, default=_json_default))
    return 0 if ok else 1


def _json_default(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")
