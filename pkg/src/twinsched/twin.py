"""Digital-twin controller.

Each cycle: ingest one event into the mirror, and when the event opens a
scheduling opportunity (submit or end), fork one what-if simulation per pool
policy, score the outcomes, and send the winner's immediate starts to the
cluster as run commands.

Scores are costs. The weighted sum adds wait times and slowdowns, so the
policy with the *lowest* score wins.
"""

from __future__ import annotations

import enum
import heapq
import logging
import math
import socket
import threading
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

from .core import (DEFAULT_SLOWDOWN_BOUND, ClusterState, Event, EventKind,
                   InvalidArgument, Job, JobState, PolicyId, SchedError)
from .des import (DEFAULT_EVENT_BUDGET, SimEvent, SimEventKind, SimOutcome, SimState,
                  run_to_exhaustion, snapshot)
from .emulator import CommandError, RunRejected
from .policies import PolicyConfig, plan_instance
from .stream import StreamError

log = logging.getLogger(__name__)

DEFAULT_POOL = (PolicyId.WFP, PolicyId.FCFS, PolicyId.SJF)


class DesyncError(SchedError):
    """The mirror disagrees with an incoming event."""


class Action(enum.Enum):
    NO_ACTION = "no_action"
    SCHEDULE_NEEDED = "schedule_needed"


@dataclass(frozen=True)
class ScoreConfig:
    w_max_wait: float = 0.25
    w_max_slowdown: float = 0.25
    w_avg_wait: float = 0.25
    w_avg_slowdown: float = 0.25
    tie_break_order: tuple[PolicyId, ...] = DEFAULT_POOL
    tie_epsilon: float = 1e-9
    normalize: bool = False  # min-max normalize each metric across outcomes first

    def __post_init__(self):
        object.__setattr__(self, "tie_break_order",
                           tuple(PolicyId.parse(p) for p in self.tie_break_order))
        w = self.weights
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise InvalidArgument("score weights must be non-negative with at least one positive")
        if self.tie_epsilon < 0:
            raise InvalidArgument("tie_epsilon must be non-negative")

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.w_max_wait, self.w_max_slowdown, self.w_avg_wait, self.w_avg_slowdown)

    def to_dict(self) -> dict:
        return {"w_max_wait": self.w_max_wait, "w_max_slowdown": self.w_max_slowdown,
                "w_avg_wait": self.w_avg_wait, "w_avg_slowdown": self.w_avg_slowdown,
                "tie_break_order": [p.value for p in self.tie_break_order],
                "tie_epsilon": self.tie_epsilon, "normalize": self.normalize}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreConfig":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise InvalidArgument(f"unknown score fields: {sorted(unknown)}")
        kw = dict(d)
        if "tie_break_order" in kw:
            kw["tie_break_order"] = tuple(kw["tie_break_order"])
        return cls(**kw)


def _metric_vector(o) -> tuple[float, float, float, float]:
    return (o.max_wait, o.max_slowdown, o.avg_wait, o.avg_slowdown)


def score(outcome, cfg: ScoreConfig = ScoreConfig()) -> float:
    """Weighted cost of an outcome (anything with the four wait/slowdown fields)."""
    return math.fsum(w * m for w, m in zip(cfg.weights, _metric_vector(outcome)))


def _normalized_costs(outcomes: Sequence, cfg: ScoreConfig) -> list[float]:
    vecs = [_metric_vector(o) for o in outcomes]
    cols = list(zip(*vecs))
    costs = []
    for v in vecs:
        parts = []
        for i, x in enumerate(v):
            lo, hi = min(cols[i]), max(cols[i])
            parts.append(cfg.weights[i] * (0.0 if hi == lo else (x - lo) / (hi - lo)))
        costs.append(math.fsum(parts))
    return costs


def select_policy(outcomes: Sequence[SimOutcome], cfg: ScoreConfig = ScoreConfig()
                  ) -> tuple[PolicyId, list[tuple[str, int]]]:
    """Lowest-cost outcome; near-ties go to the earliest policy in ``tie_break_order``."""
    if not outcomes:
        raise InvalidArgument("no outcomes to select from")
    costs = _normalized_costs(outcomes, cfg) if cfg.normalize else [score(o, cfg) for o in outcomes]
    best = min(costs)
    ties = [i for i, c in enumerate(costs)
            if math.isclose(c, best, rel_tol=cfg.tie_epsilon, abs_tol=0.0)]
    rank = {p: r for r, p in enumerate(cfg.tie_break_order)}
    # policies missing from the tie order fall back to pool order
    chosen = min(ties, key=lambda i: (rank.get(outcomes[i].policy, len(rank)), i))
    return outcomes[chosen].policy, list(outcomes[chosen].immediate_starts)


class RunSink(Protocol):
    def run(self, job_id: str) -> None: ...


class SocketRunSink:
    """Client for a ``RUN <job_id>`` line server (one command, one reply line)."""

    def __init__(self, address, timeout: float = 5.0):
        self.address = tuple(address)
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._fh = None
        self._lock = threading.Lock()

    def _connect(self):
        self._sock = socket.create_connection(self.address, timeout=self.timeout)
        self._fh = self._sock.makefile("rw", encoding="utf-8", newline="\n")

    def run(self, job_id: str) -> None:
        with self._lock:
            try:
                if self._fh is None:
                    self._connect()
                self._fh.write(f"RUN {job_id}\n")
                self._fh.flush()
                reply = self._fh.readline()
            except OSError:
                self.close()
                raise
            if not reply:
                self.close()
                raise ConnectionError("run-command server closed the connection")
        reply = reply.strip()
        if reply.startswith("REJECTED"):
            raise RunRejected(reply[len("REJECTED"):].strip())
        if reply.startswith("ERROR"):
            raise CommandError(reply[len("ERROR"):].strip())

    def close(self) -> None:
        if self._fh is not None:
            try:
                self._fh.close()
                self._sock.close()
            except OSError:
                pass
        self._fh = self._sock = None


class RecordingSink:
    """Accepts every command and remembers it (used for replay)."""

    def __init__(self):
        self.commands: list[str] = []

    def run(self, job_id: str) -> None:
        self.commands.append(job_id)


def _simulate(args) -> SimOutcome:
    state, cfg, budget = args
    return run_to_exhaustion(state, cfg, budget)


class Twin:
    """The twin's control loop state: a mirror of the cluster plus a policy pool."""

    def __init__(self, total_nodes: int, pool=DEFAULT_POOL,
                 score_config: ScoreConfig = ScoreConfig(),
                 slowdown_bound: int = DEFAULT_SLOWDOWN_BOUND,
                 workers: int = 1, parallel: str = "thread",
                 event_budget: int = DEFAULT_EVENT_BUDGET,
                 status_source: Optional[Callable[[], tuple[ClusterState, list[Job]]]] = None):
        self.pool = [PolicyConfig.coerce(p) for p in pool]
        if not self.pool:
            raise InvalidArgument("policy pool must not be empty")
        self.score_config = score_config
        self.mirror = SimState.empty(total_nodes, slowdown_bound=slowdown_bound)
        self.last_decisions: list[tuple[str, PolicyId]] = []
        self.event_budget = event_budget
        self.status_source = status_source
        self.cycles = 0
        self.resyncs = 0
        if workers > 1:
            cls = ProcessPoolExecutor if parallel == "process" else ThreadPoolExecutor
            self._executor: Optional[Executor] = cls(max_workers=workers)
        else:
            self._executor = None

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- synchronization -------------------------------------------------

    def _remove_completion(self, job_id: str) -> None:
        q = self.mirror.event_queue
        kept = [e for e in q if not (e.kind is SimEventKind.COMPLETION and e.job_id == job_id)]
        if len(kept) != len(q):
            heapq.heapify(kept)
            self.mirror.event_queue = kept

    def _advance_clock(self, t: int) -> None:
        m = self.mirror
        if t < m.clock:
            raise DesyncError(f"event at t={t} precedes the mirror clock {m.clock}")
        if t == m.clock:
            return
        m.clock = t
        m.started_at_current_clock = []
        for job_id, a in list(m.cluster.allocations.items()):
            if a.predicted_end < t:
                # still running past its walltime: push the predicted end forward
                m.cluster.allocations[job_id] = a._replace(predicted_end=t)
                self._remove_completion(job_id)
                m.push(t, SimEventKind.COMPLETION, job_id)

    def predicted_end(self, job_id: str) -> Optional[int]:
        a = self.mirror.cluster.allocations.get(job_id)
        return a.predicted_end if a else None

    def ingest_event(self, event: Event) -> Action:
        m = self.mirror
        job = m.jobs.get(event.job_id)
        if event.kind is EventKind.SUBMIT:
            if job is not None:
                raise DesyncError(f"duplicate submit for job {event.job_id}")
            new = event.to_job()
            if new.requested_nodes > m.cluster.total_nodes:
                raise DesyncError(f"job {new.job_id} can never fit the cluster")
            self._advance_clock(event.timestamp)
            m.enqueue(new)
            return Action.SCHEDULE_NEEDED

        if event.kind is EventKind.RUN:
            if job is None or job.state is JobState.COMPLETED:
                raise DesyncError(f"run event for job {event.job_id} which is not waiting")
            self._advance_clock(event.timestamp)
            if job.state is JobState.RUNNING:
                if job.start_time != event.timestamp:
                    raise DesyncError(
                        f"job {event.job_id} started at t={event.timestamp}, "
                        f"mirror says t={job.start_time}")
                return Action.NO_ACTION  # confirms our own command
            m.start_jobs([job])
            return Action.NO_ACTION

        if job is None or job.state is not JobState.RUNNING:
            raise DesyncError(f"end event for job {event.job_id} which is not running")
        self._advance_clock(event.timestamp)
        # pull back (early finish) or push forward (late finish) to the true end
        self._remove_completion(event.job_id)
        m.complete_job(event.job_id, event.timestamp)
        return Action.SCHEDULE_NEEDED

    def resync(self, authoritative: ClusterState, waiting: Sequence[Job]) -> None:
        """Rebuild the mirror from an authoritative cluster snapshot."""
        if not authoritative.is_consistent(strict_clock=False):
            raise DesyncError("inconsistent authoritative snapshot rejected")
        m = self.mirror
        clock = max(m.clock, authoritative.clock)
        same_allocs = {k: (a.nodes, a.start_time) for k, a in m.cluster.allocations.items()} == \
            {k: (a.nodes, a.start_time) for k, a in authoritative.allocations.items()}
        if same_allocs and [j.job_id for j in m.wait_queue] == [j.job_id for j in waiting] \
                and clock == m.clock:
            return
        self.resyncs += 1
        new = SimState.empty(m.cluster.total_nodes, clock=clock, slowdown_bound=m.slowdown_bound)
        new.next_sequence = m.next_sequence
        new.completed = list(m.completed)
        new.jobs = {k: j for k, j in m.jobs.items() if j.state is JobState.COMPLETED}
        for job_id in sorted(authoritative.allocations):
            a = authoritative.allocations[job_id]
            known = m.jobs.get(job_id)
            if known is not None:
                base = known.public()
            else:
                base = Job(job_id, a.start_time, a.nodes, max(1, a.predicted_end - a.start_time))
            running = base.start(a.start_time)
            end = max(a.start_time + base.requested_walltime, clock)
            new.cluster.allocate(job_id, base.requested_nodes, a.start_time, end)
            new.jobs[job_id] = running
            new.push(end, SimEventKind.COMPLETION, job_id)
        for job in waiting:
            new.jobs.pop(job.job_id, None)
            new.enqueue(job.public())
        self.mirror = new

    def resync_from_source(self) -> None:
        if self.status_source is None:
            raise DesyncError("no status source to resynchronize from")
        cluster, waiting = self.status_source()
        self.resync(cluster, waiting)

    # -- prediction and selection ----------------------------------------

    def what_if(self) -> list[SimOutcome]:
        base = self.mirror
        tasks = [(snapshot(base), cfg, self.event_budget) for cfg in self.pool]
        if self._executor is None:
            return [_simulate(t) for t in tasks]
        # map() yields in submission order, whatever order the workers finish in
        return list(self._executor.map(_simulate, tasks))

    def decide(self) -> tuple[PolicyId, list[tuple[str, int]]]:
        return select_policy(self.what_if(), self.score_config)

    def _apply_start(self, job_id: str) -> None:
        m = self.mirror
        job = m.jobs[job_id]
        if job.requested_nodes > m.cluster.free_nodes:
            raise SchedError(f"decision for {job_id} does not fit the mirror's free nodes")
        m.start_jobs([job])

    def _undo_start(self, job_id: str, original: Job) -> None:
        m = self.mirror
        m.cluster.release(job_id)
        self._remove_completion(job_id)
        m.jobs[job_id] = original
        m.wait_queue.append(original)
        m.wait_queue.sort(key=lambda j: (j.submit_time, j.job_id))

    def _send(self, sink: RunSink, job_id: str) -> bool:
        for attempt in (1, 2):
            try:
                sink.run(job_id)
                return True
            except (RunRejected, CommandError) as exc:
                log.warning("run command for %s refused: %s", job_id, exc)
                return False
            except (OSError, StreamError) as exc:
                if attempt == 2:
                    log.error("dropping run command for %s after retry: %s", job_id, exc)
                    return False
        return False  # pragma: no cover

    def schedule(self, sink: RunSink) -> list[tuple[str, PolicyId]]:
        policy, starts = self.decide()
        emitted = []
        refused = False
        for job_id, _nodes in starts:
            original = self.mirror.jobs[job_id]
            # optimistic: the mirror treats the job as started before the run event arrives
            self._apply_start(job_id)
            if self._send(sink, job_id):
                emitted.append((job_id, policy))
            else:
                self._undo_start(job_id, original)
                refused = True
        self.last_decisions.extend(emitted)
        if refused and self.status_source is not None:
            self.resync_from_source()
        return emitted

    def cycle(self, event: Event, sink: RunSink) -> list[tuple[str, PolicyId]]:
        self.cycles += 1
        try:
            action = self.ingest_event(event)
        except DesyncError as exc:
            if self.status_source is None:
                raise
            log.warning("desync on %s/%s: %s; resynchronizing", event.kind.value, event.job_id, exc)
            self.resync_from_source()
            action = Action.SCHEDULE_NEEDED
        if action is Action.NO_ACTION:
            return []
        return self.schedule(sink)


class StaticController(Twin):
    """Fixed-policy scheduler sharing the twin's mirror and feedback path.

    It runs one scheduling instance at every opportunity instead of
    forking what-if simulations.
    """

    def __init__(self, total_nodes: int, policy, **kw):
        kw.pop("pool", None)
        kw.pop("workers", None)
        super().__init__(total_nodes, pool=[policy], workers=1, **kw)
        self.policy = self.pool[0]

    def decide(self) -> tuple[PolicyId, list[tuple[str, int]]]:
        m = self.mirror
        plan = plan_instance(m.wait_queue, m.cluster, m.clock, self.policy)
        return self.policy.id, [(j.job_id, j.requested_nodes) for j in plan.starts]
