import random

import pytest
from hypothesis import given, settings, strategies as st

from twinsched.core import ClusterState, InvalidArgument, Job, PolicyId
from twinsched.des import SimState
from twinsched.policies import (PolicyConfig, order_queue, plan_instance,
                                schedule_instance, shadow_time)

from oracles import easy_start_set_exhaustive, scan_shadow

FCFS, WFP, SJF = (PolicyConfig(p) for p in (PolicyId.FCFS, PolicyId.WFP, PolicyId.SJF))


def ids(jobs):
    return [j.job_id for j in jobs]


def test_fcfs_orders_by_submit():
    q = [Job("C", 10, 1, 5), Job("A", 0, 1, 5), Job("B", 5, 1, 5)]
    assert ids(order_queue(q, 10, FCFS)) == ["A", "B", "C"]


def test_sjf_orders_by_walltime():
    q = [Job("A", 0, 1, 300), Job("B", 0, 1, 60), Job("C", 0, 1, 120)]
    assert ids(order_queue(q, 0, SJF)) == ["B", "C", "A"]


def test_wfp_orders_by_utility():
    # A: 4 * (100/100)^3 = 4 ; B: 1 * (50/100)^3 = 0.125
    q = [Job("B", 50, 1, 100), Job("A", 0, 4, 100)]
    assert ids(order_queue(q, 100, WFP)) == ["A", "B"]


def test_ties_break_on_submit_then_id():
    q = [Job("b", 0, 1, 60), Job("a", 0, 1, 60), Job("c", 1, 1, 60)]
    for cfg in (FCFS, SJF):
        assert ids(order_queue(q, 1, cfg)) == ["a", "b", "c"]


def test_policy_config_validation():
    with pytest.raises(InvalidArgument):
        PolicyConfig(PolicyId.WFP, wfp_exponent=0)
    assert PolicyConfig.from_dict("sjf").id is PolicyId.SJF
    cfg = PolicyConfig(PolicyId.WFP, False, 2.0)
    assert PolicyConfig.from_dict(cfg.to_dict()) == cfg


jobs_st = st.lists(
    st.tuples(st.integers(0, 50), st.integers(1, 8), st.integers(1, 500)),
    min_size=0, max_size=12,
).map(lambda rows: [Job(f"j{i}", s, n, w) for i, (s, n, w) in enumerate(rows)])


@given(jobs_st, st.sampled_from([FCFS, WFP, SJF]))
def test_order_is_permutation(jobs, cfg):
    out = order_queue(jobs, 60, cfg)
    assert sorted(ids(out)) == sorted(ids(jobs))


@given(jobs_st, st.integers(50, 10_000))
def test_fcfs_independent_of_clock(jobs, clock):
    assert ids(order_queue(jobs, clock, FCFS)) == ids(order_queue(jobs, 50, FCFS))


@given(jobs_st)
def test_wfp_with_zero_waits_is_submit_order(jobs):
    same = [Job(j.job_id, 7, j.requested_nodes, j.requested_walltime) for j in jobs]
    assert ids(order_queue(same, 7, WFP)) == ids(order_queue(same, 7, FCFS))


@given(jobs_st, st.integers(2, 5))
def test_wfp_order_invariant_to_utility_scaling(jobs, c):
    # scaling every node count by c scales every utility by c
    scaled = [Job(j.job_id, j.submit_time, j.requested_nodes * c, j.requested_walltime) for j in jobs]
    assert ids(order_queue(jobs, 80, WFP)) == ids(order_queue(scaled, 80, WFP))


def test_shadow_time_matches_scan():
    running = [(2, 30), (1, 10), (3, 30), (2, 50)]
    for needed in range(1, 9):
        t, extra = shadow_time([(e, n) for n, e in running], 0, needed, 0)
        assert t == scan_shadow(8, running, needed, 0)
        assert extra == 8 - sum(n for n, e in running if e > t) - needed


def _state(total, running, queue, clock=0):
    s = SimState.empty(total, clock=clock)
    for jid, nodes, end in running:
        s.jobs[jid] = Job(jid, 0, nodes, max(1, end)).start(0)
        s.cluster.allocate(jid, nodes, 0, end)
    for j in queue:
        s.enqueue(j)
    return s


def test_head_fits_starts_without_backfill_scan():
    s = _state(4, [], [Job("H", 0, 4, 100)])
    assert schedule_instance(s, FCFS) == [("H", 4)]
    assert s.cluster.free_nodes == 0 and not s.wait_queue


def test_backfill_respects_reservation():
    # R holds 3 of 4 nodes until t=100; H needs 4 -> reserved at 100.
    q = [Job("H", 0, 4, 100), Job("B", 1, 1, 50), Job("C", 2, 1, 200)]
    s = _state(4, [("R", 3, 100)], q, clock=2)
    plan = plan_instance(s.wait_queue, s.cluster, 2, FCFS)
    assert plan.head.job_id == "H" and plan.reservation == 100 and plan.extra_nodes == 0
    assert schedule_instance(s, FCFS) == [("B", 1)]
    # C would run past t=100 and the reservation leaves no spare node
    assert easy_start_set_exhaustive(q, 4, [(3, 100)], 2, PolicyId.FCFS) == ["B"]


def test_no_backfill_starts_prefix_only():
    q = [Job("H", 0, 4, 100), Job("B", 1, 1, 50)]
    s = _state(4, [("R", 3, 100)], q, clock=1)
    assert schedule_instance(s, PolicyConfig(PolicyId.FCFS, backfill_enabled=False)) == []


def _random_instance(rng):
    total = rng.randint(1, 4)
    running = []
    used = 0
    for k in range(rng.randint(0, 3)):
        n = rng.randint(1, total)
        if used + n > total:
            break
        used += n
        running.append((f"r{k}", n, rng.randint(1, 150)))
    # spread submits so WFP utilities differ; the clock sits at the latest submit
    queue = [Job(f"q{i}", i * rng.randint(0, 3), rng.randint(1, total), rng.randint(1, 200))
             for i in range(rng.randint(0, 6))]
    clock = max([j.submit_time for j in queue], default=0)
    running = [(jid, n, max(end, clock)) for jid, n, end in running]
    return total, running, queue, clock


@pytest.mark.parametrize("policy", list(PolicyId))
@pytest.mark.parametrize("backfill", [True, False])
def test_schedule_instance_matches_exhaustive_oracle(policy, backfill):
    rng = random.Random(f"{policy}-{backfill}")
    cfg = PolicyConfig(policy, backfill_enabled=backfill)
    for _ in range(300):
        total, running, queue, clock = _random_instance(rng)
        s = _state(total, running, queue, clock)
        got = [jid for jid, _ in schedule_instance(s, cfg)]
        want = easy_start_set_exhaustive(queue, total, [(n, e) for _, n, e in running],
                                         clock, policy, backfill)
        assert sorted(got) == sorted(want), (total, running, queue, clock)


@pytest.mark.parametrize("policy", list(PolicyId))
def test_without_backfill_starts_are_prefix(policy):
    rng = random.Random(str(policy))
    cfg = PolicyConfig(policy, backfill_enabled=False)
    for _ in range(200):
        total, running, queue, clock = _random_instance(rng)
        s = _state(total, running, queue, clock)
        order = ids(order_queue(queue, clock, cfg))
        got = [jid for jid, _ in schedule_instance(s, cfg)]
        assert got == order[:len(got)]
