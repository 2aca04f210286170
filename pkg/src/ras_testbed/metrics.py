"""Run metrics, aggregate statistics and their file formats.

Per-run records are written as one JSON document each plus a flat CSV with
one row per (run, subdomain). Field names are stable; serialisation is
deterministic (sorted keys, fixed float repr) so exporting the same records
twice produces identical bytes. Only the aggregate document carries an
export timestamp.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PHASES",
    "RunMetrics",
    "AggregateStats",
    "aggregate",
    "export_metrics",
    "export_comm_heatmap",
    "read_metrics_csv",
    "CSV_FIELDS",
]

PHASES = ("local_solve", "boundary_exchange", "convergence_check", "other")


@dataclass
class RunMetrics:
    mode: str
    num_subdomains: int
    time_to_solution: float
    update_counts: list[int]
    phase_timers: list[dict[str, float]]
    terminated: bool
    verified: bool
    residual_norm: float
    relative_residual: float
    iterations: int
    cg_failures: list[int] = field(default_factory=list)
    flushes: list[int] = field(default_factory=list)
    error: str | None = None
    config: dict = field(default_factory=dict)
    run_index: int = 0
    timestamp: float = field(default_factory=time.time)

    @property
    def update_spread(self) -> dict[str, float]:
        counts = self.update_counts
        return {
            "min": int(min(counts)),
            "median": float(statistics.median(counts)),
            "max": int(max(counts)),
            "spread": int(max(counts) - min(counts)),
        }

    def mean_phase_timers(self) -> dict[str, float]:
        """Phase timers averaged over subdomains."""
        return {ph: float(np.mean([t.get(ph, 0.0) for t in self.phase_timers])) for ph in PHASES}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["update_spread"] = self.update_spread
        d["mean_phase_timers"] = self.mean_phase_timers()
        return d


@dataclass
class AggregateStats:
    runs: int
    failures: int
    unverified: int
    metrics: dict[str, dict[str, float]]
    update_spread: list[dict[str, float]]

    def to_dict(self) -> dict:
        return asdict(self)


def _summary(values) -> dict[str, float]:
    values = [float(v) for v in values]
    return {
        "mean": float(np.mean(values)),
        "min": min(values),
        "median": float(statistics.median(values)),
        "max": max(values),
    }


def aggregate(records: list[RunMetrics]) -> AggregateStats:
    """Mean/min/median/max of scalar metrics over runs, plus per-run update spread."""
    if not records:
        raise ValueError("no records to aggregate")
    per_metric = {
        "time_to_solution": [r.time_to_solution for r in records],
        "iterations": [r.iterations for r in records],
        "residual_norm": [r.residual_norm for r in records],
        "relative_residual": [r.relative_residual for r in records],
        "total_updates": [sum(r.update_counts) for r in records],
        "update_spread": [r.update_spread["spread"] for r in records],
    }
    for ph in PHASES:
        per_metric[f"mean_{ph}"] = [r.mean_phase_timers()[ph] for r in records]
    return AggregateStats(
        runs=len(records),
        failures=sum(not r.terminated for r in records),
        unverified=sum(not r.verified for r in records),
        metrics={k: _summary(v) for k, v in per_metric.items()},
        update_spread=[r.update_spread for r in records],
    )


CSV_FIELDS = [
    "run_index", "mode", "subdomain", "update_count", *PHASES,
    "time_to_solution", "iterations", "terminated", "verified", "residual_norm",
]


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def export_metrics(records: list[RunMetrics], path, stats: AggregateStats | None = None) -> dict[str, Path]:
    """Write ``run_XXX.json`` per record, ``metrics.csv`` and ``aggregate.json`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for rec in records:
        p = out / f"run_{rec.run_index:03d}.json"
        p.write_text(_dump_json(rec.to_dict()))
        written[p.name] = p

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rec in records:
        for s in range(rec.num_subdomains):
            row = {
                "run_index": rec.run_index,
                "mode": rec.mode,
                "subdomain": s,
                "update_count": rec.update_counts[s],
                "time_to_solution": repr(float(rec.time_to_solution)),
                "iterations": rec.iterations,
                "terminated": rec.terminated,
                "verified": rec.verified,
                "residual_norm": repr(float(rec.residual_norm)),
            }
            for ph in PHASES:
                row[ph] = repr(float(rec.phase_timers[s].get(ph, 0.0)))
            w.writerow(row)
    csv_path = out / "metrics.csv"
    csv_path.write_text(buf.getvalue())
    written[csv_path.name] = csv_path

    stats = aggregate(records) if stats is None else stats
    agg = {
        "exported_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": records[0].config if records else {},
        "aggregate": stats.to_dict(),
    }
    agg_path = out / "aggregate.json"
    agg_path.write_text(_dump_json(agg))
    written[agg_path.name] = agg_path
    return written


def read_metrics_csv(path) -> list[dict]:
    """Parse ``metrics.csv`` back into typed rows."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            typed = dict(row)
            for k in ("run_index", "subdomain", "update_count", "iterations"):
                typed[k] = int(row[k])
            for k in ("time_to_solution", "residual_norm", *PHASES):
                typed[k] = float(row[k])
            for k in ("terminated", "verified"):
                typed[k] = row[k] == "True"
            rows.append(typed)
    return rows


def export_comm_heatmap(pattern, path) -> None:
    """P x P receive counts as CSV, row = receiving subdomain."""
    pattern.to_csv(path)
