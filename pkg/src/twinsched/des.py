"""Discrete-event scheduling simulator.

The clock jumps from event to event. Each popped event updates the state and
then triggers exactly one scheduling instance. Simulated jobs run for their
requested walltime; the simulator never sees true runtimes.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

from .core import (DEFAULT_SLOWDOWN_BOUND, ClusterState, InvalidArgument,
                   InvariantViolation, Job, JobMetrics, JobState, PolicyId,
                   SchedError)
from .metrics import utilization
from .policies import PolicyConfig, schedule_instance

DEFAULT_EVENT_BUDGET = 10**7


class CorruptedStateError(SchedError):
    pass


class RunawaySimulationError(SchedError):
    def __init__(self, msg, policy: Optional[PolicyId] = None):
        super().__init__(msg)
        self.policy = policy


class SimEventKind(enum.IntEnum):
    # completions sort ahead of arrivals at equal times
    COMPLETION = 0
    ARRIVAL = 1


class SimEvent(NamedTuple):
    time: int
    kind: SimEventKind
    sequence: int
    job_id: str


@dataclass
class SimState:
    cluster: ClusterState
    wait_queue: list[Job] = field(default_factory=list)
    event_queue: list[SimEvent] = field(default_factory=list)
    completed: list[tuple[Job, JobMetrics]] = field(default_factory=list)
    started_at_current_clock: list[tuple[str, int]] = field(default_factory=list)
    jobs: dict[str, Job] = field(default_factory=dict)
    next_sequence: int = 0
    slowdown_bound: int = DEFAULT_SLOWDOWN_BOUND

    @classmethod
    def empty(cls, total_nodes: int, clock: int = 0, **kw) -> "SimState":
        return cls(ClusterState(total_nodes, clock=clock), **kw)

    @classmethod
    def from_trace(cls, jobs: Iterable[Job], total_nodes: int, **kw) -> "SimState":
        """Open-loop state: every job becomes an arrival event."""
        state = cls.empty(total_nodes, **kw)
        for job in jobs:
            state.add_arrival(job.public())
        return state

    @property
    def clock(self) -> int:
        return self.cluster.clock

    @clock.setter
    def clock(self, t: int) -> None:
        self.cluster.clock = t

    def push(self, time: int, kind: SimEventKind, job_id: str) -> SimEvent:
        ev = SimEvent(time, kind, self.next_sequence, job_id)
        self.next_sequence += 1
        heapq.heappush(self.event_queue, ev)
        return ev

    def add_arrival(self, job: Job) -> None:
        if job.requested_nodes > self.cluster.total_nodes:
            raise InvalidArgument(f"job {job.job_id} can never fit the cluster")
        if job.job_id in self.jobs:
            raise InvalidArgument(f"duplicate job id {job.job_id}")
        self.jobs[job.job_id] = job
        self.push(job.submit_time, SimEventKind.ARRIVAL, job.job_id)

    def enqueue(self, job: Job) -> None:
        """Put an already-submitted job straight into the wait queue."""
        if job.job_id in self.jobs:
            raise InvalidArgument(f"duplicate job id {job.job_id}")
        self.jobs[job.job_id] = job
        self.wait_queue.append(job)

    def start_jobs(self, jobs: list[Job]) -> None:
        if not jobs:
            return
        clock = self.clock
        ids = set()
        for job in jobs:
            end = clock + job.requested_walltime
            self.cluster.allocate(job.job_id, job.requested_nodes, clock, end)
            self.jobs[job.job_id] = job.start(clock)
            self.push(end, SimEventKind.COMPLETION, job.job_id)
            self.started_at_current_clock.append((job.job_id, job.requested_nodes))
            ids.add(job.job_id)
        self.wait_queue = [j for j in self.wait_queue if j.job_id not in ids]

    def complete_job(self, job_id: str, t: int) -> Job:
        self.cluster.release(job_id)
        job = self.jobs[job_id].complete(t)
        self.jobs[job_id] = job
        self.completed.append((job, job.metrics(self.slowdown_bound)))
        return job

    def check(self) -> None:
        self.cluster.check()
        waiting = {j.job_id for j in self.wait_queue}
        running = set(self.cluster.allocations)
        done = {j.job_id for j, _ in self.completed}
        if waiting & running or waiting & done or running & done:
            raise InvariantViolation("a job is in more than one lifecycle set")


def snapshot(state: SimState) -> SimState:
    """Independent copy; jobs are immutable so containers are copied one level deep."""
    return SimState(
        cluster=state.cluster.copy(),
        wait_queue=list(state.wait_queue),
        event_queue=list(state.event_queue),
        completed=list(state.completed),
        started_at_current_clock=list(state.started_at_current_clock),
        jobs=dict(state.jobs),
        next_sequence=state.next_sequence,
        slowdown_bound=state.slowdown_bound,
    )


def step(state: SimState, policy) -> SimState:
    """Pop the earliest event, apply it, then run one scheduling instance."""
    if not state.event_queue:
        raise InvalidArgument("step() on an empty event queue")
    ev = heapq.heappop(state.event_queue)
    if ev.time < state.clock:
        raise CorruptedStateError(f"event for {ev.job_id} at t={ev.time} is behind the clock")
    if ev.time != state.clock:
        state.started_at_current_clock = []
        state.clock = ev.time

    job = state.jobs.get(ev.job_id)
    if job is None:
        raise CorruptedStateError(f"event for unknown job {ev.job_id}")
    if ev.kind is SimEventKind.ARRIVAL:
        if job.state is not JobState.WAITING:
            raise CorruptedStateError(f"arrival for job {ev.job_id} in state {job.state.value}")
        state.wait_queue.append(job)
    else:
        if ev.job_id not in state.cluster.allocations:
            raise CorruptedStateError(f"completion for job {ev.job_id} which is not running")
        state.complete_job(ev.job_id, ev.time)

    schedule_instance(state, policy)
    return state


@dataclass
class SimOutcome:
    policy: PolicyId
    max_wait: float = 0.0
    avg_wait: float = 0.0
    max_slowdown: float = 0.0
    avg_slowdown: float = 0.0
    utilization: float = 0.0
    immediate_starts: list[tuple[str, int]] = field(default_factory=list)
    makespan: int = 0
    metrics: dict[str, JobMetrics] = field(default_factory=dict)
    starts: dict[str, int] = field(default_factory=dict)


def run_to_exhaustion(state: SimState, policy, event_budget: int = DEFAULT_EVENT_BUDGET) -> SimOutcome:
    """Simulate until no events and no waiting jobs remain.

    Metrics cover the jobs that had not started when the run began (the wait
    queue plus pending arrivals). ``immediate_starts`` are the jobs started by
    the scheduling instance at the initial clock.
    """
    cfg = PolicyConfig.coerce(policy)
    t0 = state.clock
    tracked = {j.job_id for j in state.wait_queue}
    tracked.update(e.job_id for e in state.event_queue if e.kind is SimEventKind.ARRIVAL)
    intervals = [(a.nodes, a.start_time, a.predicted_end) for a in state.cluster.allocations.values()]
    done_before = len(state.completed)

    state.started_at_current_clock = []
    immediate = schedule_instance(state, cfg)
    n_events = 0
    while state.event_queue:
        n_events += 1
        if n_events > event_budget:
            raise RunawaySimulationError(
                f"{cfg.id} simulation exceeded {event_budget} events", cfg.id)
        step(state, cfg)
    if state.wait_queue:
        raise CorruptedStateError(f"{len(state.wait_queue)} jobs stranded in the wait queue")

    outcome = SimOutcome(cfg.id, immediate_starts=immediate, makespan=state.clock - t0)
    newly_done = state.completed[done_before:]
    for job, m in newly_done:
        # jobs running at fork time are already in intervals
        if job.job_id in tracked:
            outcome.metrics[job.job_id] = m
            outcome.starts[job.job_id] = job.start_time
            intervals.append((job.requested_nodes, job.start_time, job.end_time))
    if state.clock > t0:
        outcome.utilization = utilization(intervals, state.cluster.total_nodes, (t0, state.clock))
    if outcome.metrics:
        waits = [m.wait_time for m in outcome.metrics.values()]
        sds = [m.slowdown for m in outcome.metrics.values()]
        outcome.max_wait = max(waits)
        outcome.avg_wait = sum(waits) / len(waits)
        outcome.max_slowdown = max(sds)
        outcome.avg_slowdown = sum(sds) / len(sds)
    return outcome
