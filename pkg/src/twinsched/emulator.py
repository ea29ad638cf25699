"""Stand-in for a PBS-managed cluster.

The emulator owns the ground truth: it runs jobs for their *true* runtimes,
starts jobs only when told to, and publishes submit/run/end events. In
virtual-time mode its clock only moves when :meth:`Emulator.advance` is called,
so the driver can let the twin finish a whole cycle between two events.
"""

from __future__ import annotations

import heapq
import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Union

from .core import (ClusterState, Event, EventKind, InvalidArgument,
                   Job, JobState, OversizedJobError, SchedError)
from .stream import StreamError

log = logging.getLogger(__name__)


class CommandError(SchedError):
    """Run command for an unknown or non-waiting job."""


class RunRejected(SchedError):
    """Run command the cluster cannot honour right now (not enough free nodes)."""


@dataclass(frozen=True)
class VirtualTime:
    pass


@dataclass(frozen=True)
class WallClock:
    scale: float = 1.0  # wall seconds slept per emulated second

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidArgument("wall-clock scale must be positive")


ClockMode = Union[VirtualTime, WallClock]


class Emulator:
    def __init__(self, total_nodes: int, trace: Iterable[Job], stream,
                 clock_mode: ClockMode = VirtualTime(), cleanup_delay: int = 0,
                 rng_seed: int = 0):
        trace = list(trace)
        if any(b.submit_time < a.submit_time for a, b in zip(trace, trace[1:])):
            raise InvalidArgument("trace must be sorted by submit_time")
        oversized = [j.job_id for j in trace if j.requested_nodes > total_nodes]
        if oversized:
            raise OversizedJobError(oversized, total_nodes)
        if any(j.true_runtime is None for j in trace):
            raise InvalidArgument("emulated jobs need a true runtime")
        if cleanup_delay < 0:
            raise InvalidArgument("cleanup_delay must be non-negative")
        self.cluster = ClusterState(total_nodes)
        self.stream = stream
        self.clock_mode = clock_mode
        self.cleanup_delay = cleanup_delay
        self.rng_seed = rng_seed
        self.pending_submits: deque[Job] = deque(trace)
        self.jobs: dict[str, Job] = {}
        self.waiting: dict[str, Job] = {}
        self._ends: list[tuple[int, int, str]] = []
        self._seq = 0
        self._lock = threading.RLock()

    @property
    def clock(self) -> int:
        return self.cluster.clock

    def _publish(self, event: Event) -> None:
        try:
            self.stream.append(event)
        except StreamError:
            log.error("event stream rejected %s for job %s; halting", event.kind.value, event.job_id)
            raise

    def next_event_time(self) -> Optional[int]:
        times = []
        if self._ends:
            times.append(self._ends[0][0])
        if self.pending_submits:
            times.append(self.pending_submits[0].submit_time)
        return min(times) if times else None

    def done(self) -> bool:
        return not self._ends and not self.pending_submits

    def advance(self) -> Optional[Event]:
        """Move to the next timeline event, apply it and publish it.

        Ends are published before submits that share a timestamp.
        """
        with self._lock:
            t = self.next_event_time()
            if t is None:
                return None
            if isinstance(self.clock_mode, WallClock) and t > self.clock:
                time.sleep((t - self.clock) * self.clock_mode.scale)
            self._set_clock(t)
            if self._ends and self._ends[0][0] == t:
                _, _, job_id = heapq.heappop(self._ends)
                self.cluster.release(job_id)
                self.jobs[job_id] = self.jobs[job_id].complete(t)
                event = Event(EventKind.END, t, job_id)
            else:
                job = self.pending_submits.popleft()
                self.jobs[job.job_id] = job
                self.waiting[job.job_id] = job
                event = Event.submit(job)
            self._publish(event)
            return event

    def _set_clock(self, t: int) -> None:
        self.cluster.clock = t
        for job_id, a in list(self.cluster.allocations.items()):
            if a.predicted_end < t:
                # overran its walltime; public prediction is "any moment now"
                self.cluster.allocations[job_id] = a._replace(predicted_end=t)

    def execute_run(self, job_id: str) -> None:
        with self._lock:
            job = self.waiting.get(job_id)
            if job is None:
                state = self.jobs[job_id].state.value if job_id in self.jobs else "unknown"
                raise CommandError(f"cannot run job {job_id}: {state}")
            if job.requested_nodes > self.cluster.free_nodes:
                raise RunRejected(
                    f"job {job_id} needs {job.requested_nodes} nodes, "
                    f"{self.cluster.free_nodes} free")
            t = self.clock
            del self.waiting[job_id]
            self.cluster.allocate(job_id, job.requested_nodes, t, t + job.requested_walltime)
            self.jobs[job_id] = job.start(t)
            end = t + job.true_runtime + self.cleanup_delay
            heapq.heappush(self._ends, (end, self._seq, job_id))
            self._seq += 1
            self._publish(Event(EventKind.RUN, t, job_id))

    # run-command sink interface
    run = execute_run

    def snapshot_authoritative(self) -> tuple[ClusterState, list[Job]]:
        """Point-in-time copy of the cluster and wait list, public fields only."""
        with self._lock:
            cluster = ClusterState(self.cluster.total_nodes, self.cluster.free_nodes,
                                   dict(self.cluster.allocations), self.clock)
            return cluster, [j.public() for j in self.waiting.values()]

    def true_end(self, job_id: str) -> Optional[int]:
        job = self.jobs.get(job_id)
        if job is None or job.state is JobState.WAITING:
            return None
        return job.start_time + job.true_runtime + self.cleanup_delay

    def completed_jobs(self) -> list[Job]:
        return [j for j in self.jobs.values() if j.state is JobState.COMPLETED]

    def emit_timeline(self, on_event=None) -> None:
        """Drive the timeline to the end, calling ``on_event`` after each event."""
        while (ev := self.advance()) is not None:
            if on_event is not None:
                on_event(ev)


class RunCommandServer:
    """Line server accepting ``RUN <job_id>`` commands for an emulator.

    Replies ``OK``, ``REJECTED <reason>`` (not enough nodes) or
    ``ERROR <reason>`` per command.
    """

    def __init__(self, emulator: Emulator, host: str = "127.0.0.1", port: int = 0):
        self.emulator = emulator
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()[:2]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self) -> None:
        self._server.settimeout(0.1)
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn: socket.socket) -> None:
        with conn, conn.makefile("rw", encoding="utf-8", newline="\n") as fh:
            for line in fh:
                reply = self.handle_line(line)
                fh.write(reply + "\n")
                fh.flush()

    def handle_line(self, line: str) -> str:
        parts = line.strip().split()
        if len(parts) != 2 or parts[0] != "RUN":
            return f"ERROR malformed command {line.strip()!r}"
        try:
            self.emulator.execute_run(parts[1])
        except RunRejected as exc:
            return f"REJECTED {exc}"
        except CommandError as exc:
            return f"ERROR {exc}"
        return "OK"

    def close(self) -> None:
        self._stop.set()
        self._thread.join(1.0)
        self._server.close()
