"""Synthetic phase-based workload generation and SWF trace I/O."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .core import InvalidArgument, Job, SchedError

log = logging.getLogger(__name__)


class WorkloadError(SchedError):
    pass


class EmptyTraceError(WorkloadError):
    pass


@dataclass(frozen=True)
class PhaseSpec:
    count: int
    nodes_range: tuple[int, int]
    walltime_range: tuple[int, int]
    runtime_fraction_range: tuple[float, float] = (0.6, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "nodes_range", tuple(self.nodes_range))
        object.__setattr__(self, "walltime_range", tuple(self.walltime_range))
        object.__setattr__(self, "runtime_fraction_range", tuple(self.runtime_fraction_range))
        if self.count < 0:
            raise InvalidArgument("phase count must be non-negative")
        (nlo, nhi), (wlo, whi) = self.nodes_range, self.walltime_range
        flo, fhi = self.runtime_fraction_range
        if not (1 <= nlo <= nhi and 1 <= wlo <= whi):
            raise InvalidArgument(f"bad phase ranges {self.nodes_range} {self.walltime_range}")
        if not 0 < flo <= fhi <= 1:
            raise InvalidArgument(f"runtime fractions must lie in (0, 1]: {self.runtime_fraction_range}")

    def to_dict(self) -> dict:
        return {"count": self.count, "nodes": list(self.nodes_range),
                "walltime": list(self.walltime_range),
                "runtime_fraction": list(self.runtime_fraction_range)}

    @classmethod
    def from_dict(cls, d) -> "PhaseSpec":
        return cls(int(d["count"]), tuple(d["nodes"]), tuple(d["walltime"]),
                   tuple(d.get("runtime_fraction", (0.6, 1.0))))


# Warm-up, large/long burst, steady medium phase, short-job tail.
DEFAULT_PHASES = (
    PhaseSpec(25, (2, 4), (60, 180)),
    PhaseSpec(35, (16, 20), (500, 700)),
    PhaseSpec(40, (6, 8), (200, 300)),
    PhaseSpec(50, (2, 4), (60, 180)),
)
DEFAULT_INTERARRIVAL = 5


def with_runtime_fraction(phases: Iterable[PhaseSpec], lo: float, hi: float) -> list[PhaseSpec]:
    return [PhaseSpec(p.count, p.nodes_range, p.walltime_range, (lo, hi)) for p in phases]


def generate_synthetic(phases: Sequence[PhaseSpec] = DEFAULT_PHASES,
                       interarrival: int = DEFAULT_INTERARRIVAL, seed: int = 0,
                       cluster_nodes: int = 32) -> list[Job]:
    """Jobs submitted every ``interarrival`` seconds, drawn phase by phase.

    The true runtime is ``walltime * fraction`` rounded to whole seconds,
    never below one second and never above the walltime.
    """
    if not phases:
        raise InvalidArgument("at least one phase is required")
    if interarrival < 0:
        raise InvalidArgument("interarrival must be non-negative")
    for p in phases:
        if p.nodes_range[1] > cluster_nodes:
            raise WorkloadError(
                f"phase requests up to {p.nodes_range[1]} nodes on a {cluster_nodes}-node cluster")
    rng = random.Random(seed)
    jobs = []
    idx = 0
    for p in phases:
        for _ in range(p.count):
            nodes = rng.randint(*p.nodes_range)
            wall = rng.randint(*p.walltime_range)
            frac = rng.uniform(*p.runtime_fraction_range)
            runtime = min(wall, max(1, round(wall * frac)))
            jobs.append(Job(str(idx), idx * interarrival, nodes, wall, true_runtime=runtime))
            idx += 1
    return jobs


def write_swf(jobs: Iterable[Job], path) -> Path:
    """Write a minimal 18-column SWF file (unused columns are -1)."""
    path = Path(path)
    lines = ["; SWF trace", "; columns: id submit wait run procs cpu mem req_procs req_time ..."]
    for j in jobs:
        run = j.true_runtime if j.true_runtime is not None else -1
        cols = [j.job_id, j.submit_time, -1, run, j.requested_nodes, -1, -1,
                j.requested_nodes, j.requested_walltime] + [-1] * 9
        lines.append(" ".join(str(c) for c in cols))
    path.write_text("\n".join(lines) + "\n")
    return path


def _num(tok: str) -> int:
    return int(float(tok))


def read_swf(path) -> list[Job]:
    """Read an SWF trace.

    Processor count comes from the requested column (8), falling back to the
    allocated column (5). Requested time falls back to the actual runtime.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise WorkloadError(f"cannot read trace {path}: {exc}") from exc
    jobs = []
    skipped = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        cols = line.split()
        if len(cols) < 9:
            raise WorkloadError(f"{path}:{lineno}: expected at least 9 columns")
        try:
            submit, run = _num(cols[1]), _num(cols[3])
            procs = _num(cols[7]) if _num(cols[7]) > 0 else _num(cols[4])
            req = _num(cols[8])
        except ValueError as exc:
            raise WorkloadError(f"{path}:{lineno}: {exc}") from exc
        if run <= 0 or procs <= 0 or submit < 0:
            skipped += 1
            continue
        if req <= 0:
            req = run
        jobs.append(Job(cols[0], submit, procs, req, true_runtime=run))
    if skipped:
        log.warning("%s: skipped %d rows with non-positive runtime or processors", path, skipped)
    if not jobs:
        raise EmptyTraceError(f"{path}: no usable jobs")
    jobs.sort(key=lambda j: j.submit_time)
    return jobs
