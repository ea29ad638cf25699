"""Run-level aggregation, radar (Kiviat) areas, policy attribution and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .core import (DEFAULT_SLOWDOWN_BOUND, InvalidArgument, Job, JobMetrics,
                   PolicyId, SchedError)

CSV_HEADER = ["job_id", "submit", "start", "end", "nodes", "wait", "slowdown", "started_by"]
RADAR_AXES = ("avg_wait", "max_wait", "avg_slowdown", "max_slowdown", "utilization")
_COST_AXES = {"avg_wait", "max_wait", "avg_slowdown", "max_slowdown"}


class ReportError(SchedError, OSError):
    pass


def utilization(jobs: Iterable, total_nodes: int, horizon: tuple[int, int]) -> float:
    """Fraction of node-seconds in ``horizon`` used by ``jobs``.

    ``jobs`` may be completed :class:`Job` objects or ``(nodes, start, end)``
    triples.
    """
    t0, t1 = horizon
    if t1 <= t0:
        raise InvalidArgument(f"empty utilization horizon {horizon}")
    if total_nodes < 1:
        raise InvalidArgument("total_nodes must be positive")
    used = 0
    for j in jobs:
        if isinstance(j, Job):
            nodes, start, end = j.requested_nodes, j.start_time, j.end_time
        else:
            nodes, start, end = j
        overlap = min(end, t1) - max(start, t0)
        if overlap > 0:
            used += nodes * overlap
    return used / (total_nodes * (t1 - t0))


@dataclass
class JobRow:
    job_id: str
    submit: int
    start: int
    end: int
    nodes: int
    wait: int
    slowdown: float
    started_by: Optional[PolicyId]


@dataclass
class RunReport:
    method: str
    per_job: list[JobRow] = field(default_factory=list)
    avg_wait: float = 0.0
    max_wait: float = 0.0
    avg_slowdown: float = 0.0
    max_slowdown: float = 0.0
    utilization: float = 0.0
    makespan: int = 0
    policy_mix: dict[PolicyId, float] = field(default_factory=dict)
    total_nodes: int = 0

    @classmethod
    def from_jobs(cls, method: str, jobs: Iterable[Job], total_nodes: int,
                  started_by: Mapping[str, PolicyId],
                  bound: int = DEFAULT_SLOWDOWN_BOUND) -> "RunReport":
        jobs = sorted(jobs, key=lambda j: (j.submit_time, j.job_id))
        rows = []
        for j in jobs:
            m: JobMetrics = j.metrics(bound)
            rows.append(JobRow(j.job_id, j.submit_time, j.start_time, j.end_time,
                               j.requested_nodes, m.wait_time, m.slowdown,
                               started_by.get(j.job_id)))
        report = cls(method, rows, total_nodes=total_nodes)
        if not rows:
            return report
        waits = [r.wait for r in rows]
        sds = [r.slowdown for r in rows]
        report.avg_wait = sum(waits) / len(rows)
        report.max_wait = max(waits)
        report.avg_slowdown = sum(sds) / len(rows)
        report.max_slowdown = max(sds)
        t0 = min(r.submit for r in rows)
        t1 = max(r.end for r in rows)
        report.makespan = t1 - t0
        report.utilization = utilization(jobs, total_nodes, (t0, t1)) if t1 > t0 else 0.0
        counts: dict[PolicyId, int] = {}
        for r in rows:
            if r.started_by is not None:
                counts[r.started_by] = counts.get(r.started_by, 0) + 1
        n = sum(counts.values())
        report.policy_mix = {p: c / n for p, c in sorted(counts.items(), key=lambda kv: kv[0].value)}
        return report

    def axis_values(self) -> dict[str, float]:
        return {a: float(getattr(self, a)) for a in RADAR_AXES}

    def start_times(self) -> dict[str, int]:
        return {r.job_id: r.start for r in self.per_job}

    def summary(self) -> dict:
        return {
            "method": self.method,
            "jobs": len(self.per_job),
            "total_nodes": self.total_nodes,
            "avg_wait": self.avg_wait,
            "max_wait": self.max_wait,
            "avg_slowdown": self.avg_slowdown,
            "max_slowdown": self.max_slowdown,
            "utilization": self.utilization,
            "makespan": self.makespan,
            "policy_mix": {p.value: f for p, f in self.policy_mix.items()},
        }


def radar_area(reports: Mapping[str, RunReport]) -> dict[str, float]:
    """Pentagon area per method over min-max normalized axes (larger is better)."""
    if len(reports) < 2:
        raise InvalidArgument("radar areas need at least two methods to normalize")
    values = {m: r.axis_values() for m, r in reports.items()}
    radii: dict[str, list[float]] = {m: [] for m in reports}
    for axis in RADAR_AXES:
        col = [values[m][axis] for m in reports]
        lo, hi = min(col), max(col)
        for m in reports:
            if hi == lo:
                r = 1.0
            else:
                r = (values[m][axis] - lo) / (hi - lo)
                if axis in _COST_AXES:
                    r = 1.0 - r
            radii[m].append(r)
    k = len(RADAR_AXES)
    wedge = 0.5 * math.sin(2 * math.pi / k)
    return {m: wedge * sum(r[i] * r[(i + 1) % k] for i in range(k)) for m, r in radii.items()}


def attribution_table(report: RunReport) -> dict[PolicyId, float]:
    """Percentage of started jobs attributed to each policy."""
    return {p: 100.0 * f for p, f in report.policy_mix.items()}


def emit_report(report: RunReport, path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (aggregate object) and ``<path>.csv`` (per-job rows)."""
    base = Path(path)
    json_path, csv_path = base.with_suffix(".json"), base.with_suffix(".csv")
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(report.summary(), indent=2) + "\n")
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in report.per_job:
                w.writerow([r.job_id, r.submit, r.start, r.end, r.nodes, r.wait,
                            repr(r.slowdown), r.started_by.value if r.started_by else ""])
    except OSError as exc:
        raise ReportError(f"cannot write report to {base}: {exc}") from exc
    return json_path, csv_path


def load_report(path) -> RunReport:
    base = Path(path)
    try:
        summary = json.loads(base.with_suffix(".json").read_text())
        with base.with_suffix(".csv").open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_HEADER:
                raise ReportError(f"{base}.csv: unexpected header {header}")
            rows = [JobRow(r[0], int(r[1]), int(r[2]), int(r[3]), int(r[4]), int(r[5]),
                           float(r[6]), PolicyId(r[7]) if r[7] else None) for r in reader]
    except OSError as exc:
        raise ReportError(f"cannot read report {base}: {exc}") from exc
    return RunReport(
        method=summary["method"], per_job=rows,
        avg_wait=summary["avg_wait"], max_wait=summary["max_wait"],
        avg_slowdown=summary["avg_slowdown"], max_slowdown=summary["max_slowdown"],
        utilization=summary["utilization"], makespan=summary["makespan"],
        policy_mix={PolicyId(p): f for p, f in summary["policy_mix"].items()},
        total_nodes=summary["total_nodes"],
    )
