"""Experiment configuration and the closed-loop driver.

The driver plays both ends of the event stream inside one process: the
emulator publishes one timeline event, then the controller consumes every
record available (including the run events its own commands produced) before
the emulator may move on.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from .core import (DEFAULT_SLOWDOWN_BOUND, InvalidArgument, InvariantViolation,
                   Job, OversizedJobError, PolicyId, SchedError)
from .emulator import Emulator
from .metrics import RunReport, attribution_table, emit_report, radar_area
from .policies import PolicyConfig
from .stream import MemoryStream, StreamRecord
from .twin import (DEFAULT_POOL, RecordingSink, ScoreConfig, StaticController, Twin,
                   score)
from .workload import (DEFAULT_INTERARRIVAL, DEFAULT_PHASES, PhaseSpec,
                       generate_synthetic, read_swf)

log = logging.getLogger(__name__)

TWIN = "Twin"


class ConfigError(SchedError, ValueError):
    def __init__(self, field_name: str, msg: str):
        self.field = field_name
        super().__init__(f"{field_name}: {msg}")


@dataclass(frozen=True)
class SyntheticTrace:
    phases: tuple[PhaseSpec, ...] = DEFAULT_PHASES
    interarrival: int = DEFAULT_INTERARRIVAL
    seed: int = 0

    def load(self, cluster_nodes: int) -> list[Job]:
        return generate_synthetic(self.phases, self.interarrival, self.seed, cluster_nodes)

    def to_dict(self) -> dict:
        return {"kind": "synthetic", "phases": [p.to_dict() for p in self.phases],
                "interarrival": self.interarrival, "seed": self.seed}


@dataclass(frozen=True)
class SwfTrace:
    path: str

    def load(self, cluster_nodes: int) -> list[Job]:
        return read_swf(self.path)

    def to_dict(self) -> dict:
        return {"kind": "swf", "path": self.path}


def _trace_from_dict(d: dict):
    kind = d.get("kind", "synthetic")
    if kind == "synthetic":
        phases = tuple(PhaseSpec.from_dict(p) for p in d["phases"]) if "phases" in d else DEFAULT_PHASES
        return SyntheticTrace(phases, int(d.get("interarrival", DEFAULT_INTERARRIVAL)),
                              int(d.get("seed", 0)))
    if kind == "swf":
        return SwfTrace(str(d["path"]))
    raise ConfigError("trace.kind", f"unknown trace kind {kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    cluster_nodes: int = 32
    pool: tuple[PolicyConfig, ...] = tuple(PolicyConfig(p) for p in DEFAULT_POOL)
    score: ScoreConfig = ScoreConfig()
    trace: object = SyntheticTrace()
    mode: str = TWIN              # "Twin" or a PolicyId value for a static baseline
    slowdown_bound: int = DEFAULT_SLOWDOWN_BOUND
    workers: int = 1
    cleanup_delay: int = 0
    output_path: str = "out"

    def validate(self) -> None:
        if self.cluster_nodes < 1:
            raise ConfigError("cluster_nodes", "must be positive")
        if self.mode == TWIN and not self.pool:
            raise ConfigError("pool", "must not be empty in Twin mode")
        if self.mode != TWIN:
            try:
                PolicyId.parse(self.mode)
            except InvalidArgument:
                raise ConfigError("mode", f"expected 'Twin' or a policy, got {self.mode!r}") from None
        if self.slowdown_bound <= 0:
            raise ConfigError("slowdown_bound", "must be positive")
        if self.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        if self.cleanup_delay < 0:
            raise ConfigError("cleanup_delay", "must be non-negative")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        if not isinstance(self.trace, SyntheticTrace):
            raise ConfigError("trace", "--seed only applies to synthetic traces")
        return replace(self, trace=replace(self.trace, seed=seed))

    def to_dict(self) -> dict:
        return {
            "cluster_nodes": self.cluster_nodes,
            "pool": [p.to_dict() for p in self.pool],
            "score": self.score.to_dict(),
            "trace": self.trace.to_dict(),
            "mode": self.mode,
            "slowdown_bound": self.slowdown_bound,
            "workers": self.workers,
            "cleanup_delay": self.cleanup_delay,
            "output_path": self.output_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration field")
        kw = {}
        key = "config"
        try:
            for key in ("cluster_nodes", "slowdown_bound", "workers", "cleanup_delay"):
                if key in d:
                    kw[key] = int(d[key])
            key = "pool"
            if key in d:
                kw[key] = tuple(PolicyConfig.from_dict(p) for p in d[key])
            key = "score"
            if key in d:
                kw[key] = ScoreConfig.from_dict(d[key])
            key = "trace"
            if key in d:
                kw[key] = _trace_from_dict(d[key])
            key = "mode"
            if key in d:
                mode = str(d[key])
                kw[key] = TWIN if mode.lower() == "twin" else PolicyId.parse(mode).value
            key = "output_path"
            if key in d:
                kw[key] = str(d[key])
        except ConfigError:
            raise
        except (InvalidArgument, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(key, str(exc)) from exc
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path} is not valid JSON: {exc}") from exc


def load_trace(cfg: ExperimentConfig) -> list[Job]:
    jobs = cfg.trace.load(cfg.cluster_nodes)
    oversized = [j.job_id for j in jobs if j.requested_nodes > cfg.cluster_nodes]
    if oversized:
        raise OversizedJobError(oversized, cfg.cluster_nodes)
    return jobs


def make_controller(cfg: ExperimentConfig, policy: Optional[str] = None, **kw) -> Twin:
    mode = policy or cfg.mode
    common = dict(score_config=cfg.score, slowdown_bound=cfg.slowdown_bound, **kw)
    if mode == TWIN:
        return Twin(cfg.cluster_nodes, pool=cfg.pool, workers=cfg.workers, **common)
    pid = PolicyId.parse(mode)
    match = [p for p in cfg.pool if p.id is pid]
    return StaticController(cfg.cluster_nodes, match[0] if match else PolicyConfig(pid), **common)


@dataclass
class LoopResult:
    report: RunReport
    decisions: list[tuple[int, str, PolicyId]]   # (event offset, job, policy)
    stream: MemoryStream
    controller: Twin
    emulator: Emulator


def check_sync(emulator: Emulator, controller: Twin, record: StreamRecord) -> None:
    """In-loop synchronization checks, run after every cycle."""
    truth = emulator.cluster
    mirror = controller.mirror.cluster
    if mirror.free_nodes != truth.free_nodes:
        raise InvariantViolation(
            f"after offset {record.offset}: mirror has {mirror.free_nodes} free nodes, "
            f"cluster has {truth.free_nodes}")
    controller.mirror.check()
    ev = record.event
    if ev.kind.value == "end":
        seen = controller.mirror.jobs[ev.job_id].end_time
        if seen != emulator.true_end(ev.job_id):
            raise InvariantViolation(
                f"job {ev.job_id}: mirror completion at {seen}, true end {emulator.true_end(ev.job_id)}")


def closed_loop(trace: Sequence[Job], controller: Twin, total_nodes: int, *,
                stream: Optional[MemoryStream] = None, cleanup_delay: int = 0,
                method: str = TWIN, bound: int = DEFAULT_SLOWDOWN_BOUND,
                check: Optional[Callable] = check_sync, max_stalls: int = 1000) -> LoopResult:
    stream = stream if stream is not None else MemoryStream()
    emu = Emulator(total_nodes, trace, stream, cleanup_delay=cleanup_delay)
    controller.status_source = emu.snapshot_authoritative
    decisions: list[tuple[int, str, PolicyId]] = []
    cursor = 0
    stalls = 0
    try:
        while True:
            if emu.advance() is None:
                if not emu.waiting:
                    break
                # nothing left on the timeline but jobs still wait: lost events
                stalls += 1
                if stalls > max_stalls:
                    raise SchedError(f"{len(emu.waiting)} jobs can never be started")
                controller.resync_from_source()
                for job_id, policy in controller.schedule(emu):
                    decisions.append((-1, job_id, policy))
                if emu.done() and emu.waiting:
                    raise SchedError(f"controller refuses to start {sorted(emu.waiting)}")
            while (rec := stream.read_blocking(cursor, 0)) is not None:
                cursor += 1
                for job_id, policy in controller.cycle(rec.event, emu):
                    decisions.append((rec.offset, job_id, policy))
                if check is not None:
                    check(emu, controller, rec)
    finally:
        stream.close()
    started_by = {job_id: policy for _, job_id, policy in decisions}
    report = RunReport.from_jobs(method, emu.completed_jobs(), total_nodes, started_by, bound)
    return LoopResult(report, decisions, stream, controller, emu)


def run_experiment(cfg: ExperimentConfig, *, stream: Optional[MemoryStream] = None,
                   check: Optional[Callable] = check_sync) -> LoopResult:
    cfg.validate()
    trace = load_trace(cfg)
    method = TWIN if cfg.mode == TWIN else PolicyId.parse(cfg.mode).value
    with make_controller(cfg) as controller:
        return closed_loop(trace, controller, cfg.cluster_nodes, stream=stream,
                           cleanup_delay=cfg.cleanup_delay, method=method,
                           bound=cfg.slowdown_bound, check=check)


def replay(cfg: ExperimentConfig, stream: MemoryStream) -> list[tuple[int, str, PolicyId]]:
    """Feed a recorded stream through a fresh controller; return its decisions."""
    decisions = []
    sink = RecordingSink()
    with make_controller(cfg) as controller:
        for rec in stream.records():
            for job_id, policy in controller.cycle(rec.event, sink):
                decisions.append((rec.offset, job_id, policy))
    return decisions


def write_decisions(decisions, path) -> None:
    lines = ["offset,job_id,policy"]
    lines += [f"{o},{j},{p.value}" for o, j, p in decisions]
    Path(path).write_text("\n".join(lines) + "\n")


def read_decisions(path) -> list[tuple[int, str, PolicyId]]:
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for row in rows:
        o, j, p = row.split(",")
        out.append((int(o), j, PolicyId(p)))
    return out


@dataclass
class Comparison:
    reports: dict[str, RunReport]
    areas: dict[str, float]
    costs: dict[str, float]
    attribution: dict[PolicyId, float]
    twin: LoopResult = field(repr=False, default=None)

    def summary(self) -> dict:
        return {
            "methods": list(self.reports),
            "radar_area": self.areas,
            "score_cost": self.costs,
            "attribution_percent": {p.value: v for p, v in self.attribution.items()},
            "metrics": {m: r.summary() for m, r in self.reports.items()},
        }


def compare(cfg: ExperimentConfig, *, stream: Optional[MemoryStream] = None,
            check: Optional[Callable] = check_sync) -> Comparison:
    """Every static policy in the pool plus the twin, on one trace."""
    reports = {}
    for p in cfg.pool:
        res = run_experiment(replace(cfg, mode=p.id.value), check=check)
        reports[p.id.value] = res.report
    twin = run_experiment(replace(cfg, mode=TWIN), stream=stream, check=check)
    reports[TWIN] = twin.report
    areas = radar_area(reports) if len(reports) >= 2 else {}
    costs = {m: score(r, cfg.score) for m, r in reports.items()}
    return Comparison(reports, areas, costs, attribution_table(twin.report), twin)


def write_comparison(comp: Comparison, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for method, report in comp.reports.items():
        emit_report(report, out / method)
    (out / "summary.json").write_text(json.dumps(comp.summary(), indent=2) + "\n")
    lines = ["policy,percent"] + [f"{p.value},{v:.4f}" for p, v in comp.attribution.items()]
    (out / "attribution.csv").write_text("\n".join(lines) + "\n")
    if comp.twin is not None:
        write_decisions(comp.twin.decisions, out / "decisions.csv")
