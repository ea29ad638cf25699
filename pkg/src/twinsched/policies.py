"""Queue orderings (FCFS, WFP, SJF) with EASY backfilling on top.

Every policy shares the same EASY machinery; only the queue order differs.
The backfill scan follows the policy's own order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, NamedTuple, Optional

from .core import ClusterState, InvalidArgument, InvariantViolation, Job, PolicyId

if TYPE_CHECKING:
    from .des import SimState


@dataclass(frozen=True)
class PolicyConfig:
    id: PolicyId
    backfill_enabled: bool = True
    wfp_exponent: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "id", PolicyId.parse(self.id))
        if not self.wfp_exponent > 0:
            raise InvalidArgument("wfp_exponent must be positive")

    @classmethod
    def coerce(cls, policy) -> "PolicyConfig":
        if isinstance(policy, cls):
            return policy
        return cls(PolicyId.parse(policy))

    def to_dict(self) -> dict:
        return {"id": self.id.value, "backfill_enabled": self.backfill_enabled,
                "wfp_exponent": self.wfp_exponent}

    @classmethod
    def from_dict(cls, d) -> "PolicyConfig":
        if isinstance(d, str):
            return cls(PolicyId.parse(d))
        unknown = set(d) - {"id", "backfill_enabled", "wfp_exponent"}
        if unknown:
            raise InvalidArgument(f"unknown policy fields: {sorted(unknown)}")
        return cls(PolicyId.parse(d["id"]), bool(d.get("backfill_enabled", True)),
                   float(d.get("wfp_exponent", 3.0)))


def wfp_utility(job: Job, clock: int, exponent: float = 3.0) -> float:
    """ALCF-style WFP utility: nodes * (queued time / walltime) ** exponent."""
    return job.requested_nodes * ((clock - job.submit_time) / job.requested_walltime) ** exponent


def order_queue(queue: Iterable[Job], clock: int, cfg: PolicyConfig) -> list[Job]:
    policy = cfg.id
    if policy is PolicyId.FCFS:
        key = lambda j: (j.submit_time, j.job_id)
    elif policy is PolicyId.SJF:
        key = lambda j: (j.requested_walltime, j.submit_time, j.job_id)
    elif policy is PolicyId.WFP:
        exp = cfg.wfp_exponent
        key = lambda j: (-wfp_utility(j, clock, exp), j.submit_time, j.job_id)
    else:  # pragma: no cover
        raise InvalidArgument(f"unsupported policy {policy}")
    return sorted(queue, key=key)


def shadow_time(ends: Iterable[tuple[int, int]], free: int, needed: int,
                clock: int) -> tuple[int, int]:
    """Earliest time ``needed`` nodes are free, and the spare nodes at that time.

    ``ends`` holds ``(predicted_end, nodes)`` for every running allocation.
    """
    if free >= needed:
        return clock, free - needed
    t_r = clock
    for end, nodes in sorted(ends):
        if free >= needed and end > t_r:
            break
        free += nodes
        t_r = max(end, clock)
    if free < needed:
        raise InvalidArgument(f"{needed} nodes can never be free on this cluster")
    return t_r, free - needed


class InstancePlan(NamedTuple):
    starts: list[Job]
    head: Optional[Job]          # first blocked job, holder of the reservation
    reservation: Optional[int]   # its shadow time
    extra_nodes: int             # spare nodes at the shadow time after backfilling


def plan_instance(queue: Iterable[Job], cluster: ClusterState, clock: int,
                  cfg: PolicyConfig) -> InstancePlan:
    """Decide which waiting jobs start now, without touching any state."""
    ordered = order_queue(queue, clock, cfg)
    free = cluster.free_nodes
    starts: list[Job] = []
    i = 0
    while i < len(ordered) and ordered[i].requested_nodes <= free:
        free -= ordered[i].requested_nodes
        starts.append(ordered[i])
        i += 1
    if i == len(ordered):
        return InstancePlan(starts, None, None, 0)

    head = ordered[i]
    ends = [(a.predicted_end, a.nodes) for a in cluster.allocations.values()]
    ends.extend((clock + j.requested_walltime, j.requested_nodes) for j in starts)
    t_r, extra = shadow_time(ends, free, head.requested_nodes, clock)
    if not cfg.backfill_enabled:
        return InstancePlan(starts, head, t_r, extra)

    for job in ordered[i + 1:]:
        if free == 0:
            break
        n = job.requested_nodes
        if n > free:
            continue
        if clock + job.requested_walltime <= t_r:
            starts.append(job)
            free -= n
        elif n <= extra:
            starts.append(job)
            free -= n
            extra -= n
    return InstancePlan(starts, head, t_r, extra)


def check_reservation(cluster: ClusterState, plan: InstancePlan) -> None:
    """Raise if the jobs now allocated would keep the head from starting at its shadow time."""
    if plan.head is None:
        return
    held = sum(a.nodes for a in cluster.allocations.values() if a.predicted_end > plan.reservation)
    if cluster.total_nodes - held < plan.head.requested_nodes:
        raise InvariantViolation(
            f"backfilling delays job {plan.head.job_id} past its reservation at "
            f"t={plan.reservation}")


def schedule_instance(state: "SimState", cfg) -> list[tuple[str, int]]:
    """Run one scheduling instance on ``state`` and start the chosen jobs in place."""
    cfg = PolicyConfig.coerce(cfg)
    plan = plan_instance(state.wait_queue, state.cluster, state.clock, cfg)
    state.start_jobs(plan.starts)
    check_reservation(state.cluster, plan)
    return [(job.job_id, job.requested_nodes) for job in plan.starts]
