"""Shared domain types: jobs, stream events, cluster accounting and metrics.

Time is integral seconds everywhere. Nodes are fungible, so an allocation is
just a node count plus its start and predicted end.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, NamedTuple, Optional

DEFAULT_SLOWDOWN_BOUND = 10


class SchedError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(SchedError, ValueError):
    pass


class InvariantViolation(SchedError, AssertionError):
    """A state-accounting invariant no longer holds."""


class OversizedJobError(SchedError, ValueError):
    def __init__(self, job_ids, total_nodes):
        self.job_ids = list(job_ids)
        self.total_nodes = total_nodes
        super().__init__(
            f"jobs request more than {total_nodes} nodes: {', '.join(self.job_ids)}"
        )


class JobState(enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    COMPLETED = "completed"


class PolicyId(str, enum.Enum):
    FCFS = "FCFS"
    WFP = "WFP"
    SJF = "SJF"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, value) -> "PolicyId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise InvalidArgument(f"unknown policy {value!r}") from None


@dataclass(frozen=True)
class Job:
    """A batch job.

    ``true_runtime`` is only known to the trace and the emulator. Jobs rebuilt
    from public stream data carry ``None`` there, and nothing on the scheduling
    side ever reads it.
    """

    job_id: str
    submit_time: int
    requested_nodes: int
    requested_walltime: int
    true_runtime: Optional[int] = field(default=None, compare=False)
    start_time: Optional[int] = None
    end_time: Optional[int] = None
    state: JobState = JobState.WAITING

    def __post_init__(self):
        if self.submit_time < 0:
            raise InvalidArgument(f"job {self.job_id}: negative submit_time")
        if self.requested_nodes < 1:
            raise InvalidArgument(f"job {self.job_id}: requested_nodes must be >= 1")
        if self.requested_walltime <= 0:
            raise InvalidArgument(f"job {self.job_id}: requested_walltime must be > 0")
        if self.true_runtime is not None and self.true_runtime <= 0:
            raise InvalidArgument(f"job {self.job_id}: true_runtime must be > 0")
        if (self.start_time is not None) != (self.state is not JobState.WAITING):
            raise InvariantViolation(f"job {self.job_id}: start_time/state mismatch")
        if (self.end_time is not None) != (self.state is JobState.COMPLETED):
            raise InvariantViolation(f"job {self.job_id}: end_time/state mismatch")
        if self.start_time is not None and self.start_time < self.submit_time:
            raise InvariantViolation(f"job {self.job_id}: starts before submission")
        if self.end_time is not None and self.end_time < self.start_time:
            raise InvariantViolation(f"job {self.job_id}: ends before it starts")

    def start(self, t: int) -> "Job":
        if self.state is not JobState.WAITING:
            raise InvariantViolation(f"job {self.job_id}: cannot start from {self.state.value}")
        return replace(self, start_time=t, state=JobState.RUNNING)

    def complete(self, t: int) -> "Job":
        if self.state is not JobState.RUNNING:
            raise InvariantViolation(f"job {self.job_id}: cannot complete from {self.state.value}")
        return replace(self, end_time=t, state=JobState.COMPLETED)

    def public(self) -> "Job":
        """Copy with the hidden runtime and lifecycle stripped."""
        return Job(self.job_id, self.submit_time, self.requested_nodes, self.requested_walltime)

    def metrics(self, bound: int = DEFAULT_SLOWDOWN_BOUND) -> "JobMetrics":
        if self.state is not JobState.COMPLETED:
            raise InvalidArgument(f"job {self.job_id} has not completed")
        wait = self.start_time - self.submit_time
        return JobMetrics(wait, slowdown(wait, self.end_time - self.start_time, bound))


class JobMetrics(NamedTuple):
    wait_time: int
    slowdown: float


def slowdown(wait, run, bound=DEFAULT_SLOWDOWN_BOUND) -> float:
    """Bounded slowdown ``max(1, (wait + run) / max(run, bound))``."""
    if run <= 0 or bound <= 0:
        raise InvalidArgument(f"run and bound must be positive (run={run}, bound={bound})")
    if wait < 0:
        raise InvalidArgument(f"negative wait {wait}")
    return max(1.0, (wait + run) / max(run, bound))


class EventKind(str, enum.Enum):
    SUBMIT = "submit"
    RUN = "run"
    END = "end"


@dataclass(frozen=True)
class Event:
    """A job event as seen on the stream.

    Submit payloads carry ``nodes`` and ``walltime``; the hidden runtime is
    never part of an event.
    """

    kind: EventKind
    timestamp: int
    job_id: str
    payload: Optional[dict[str, Any]] = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise InvalidArgument("event timestamp must be non-negative")
        if self.kind is EventKind.SUBMIT:
            if not self.payload or {"nodes", "walltime"} - set(self.payload):
                raise InvalidArgument(f"submit event for {self.job_id} lacks nodes/walltime")
        if self.payload and not set(self.payload) <= {"nodes", "walltime"}:
            raise InvalidArgument(
                f"event for {self.job_id} carries non-public fields: "
                f"{sorted(set(self.payload) - {'nodes', 'walltime'})}"
            )

    @classmethod
    def submit(cls, job: Job) -> "Event":
        return cls(EventKind.SUBMIT, job.submit_time, job.job_id,
                   {"nodes": job.requested_nodes, "walltime": job.requested_walltime})

    def to_job(self) -> Job:
        if self.kind is not EventKind.SUBMIT:
            raise InvalidArgument("only submit events describe a job")
        return Job(self.job_id, self.timestamp, int(self.payload["nodes"]),
                   int(self.payload["walltime"]))


class Allocation(NamedTuple):
    nodes: int
    start_time: int
    predicted_end: int


@dataclass
class ClusterState:
    total_nodes: int
    free_nodes: int = -1
    allocations: dict[str, Allocation] = field(default_factory=dict)
    clock: int = 0

    def __post_init__(self):
        if self.total_nodes < 1:
            raise InvalidArgument("total_nodes must be positive")
        if self.free_nodes == -1:
            self.free_nodes = self.total_nodes - sum(a.nodes for a in self.allocations.values())

    def copy(self) -> "ClusterState":
        return ClusterState(self.total_nodes, self.free_nodes, dict(self.allocations), self.clock)

    def allocate(self, job_id: str, nodes: int, start: int, predicted_end: int) -> None:
        if job_id in self.allocations:
            raise InvariantViolation(f"job {job_id} is already allocated")
        if nodes > self.free_nodes:
            raise InvariantViolation(
                f"job {job_id} needs {nodes} nodes but only {self.free_nodes} are free")
        self.allocations[job_id] = Allocation(nodes, start, predicted_end)
        self.free_nodes -= nodes

    def release(self, job_id: str) -> Allocation:
        try:
            alloc = self.allocations.pop(job_id)
        except KeyError:
            raise InvariantViolation(f"job {job_id} holds no allocation") from None
        self.free_nodes += alloc.nodes
        return alloc

    def check(self, strict_clock: bool = True) -> None:
        used = sum(a.nodes for a in self.allocations.values())
        if self.free_nodes != self.total_nodes - used or not 0 <= self.free_nodes <= self.total_nodes:
            raise InvariantViolation(
                f"node accounting broken: free={self.free_nodes}, used={used}, "
                f"total={self.total_nodes}")
        for job_id, a in self.allocations.items():
            if strict_clock and a.predicted_end < self.clock:
                raise InvariantViolation(f"job {job_id} predicted to end before the clock")

    def is_consistent(self, strict_clock: bool = True) -> bool:
        try:
            self.check(strict_clock)
        except InvariantViolation:
            return False
        return True
