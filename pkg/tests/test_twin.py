import random
import threading
import time

import pytest
from hypothesis import given, strategies as st

from twinsched.core import ClusterState, Event, EventKind, Job, PolicyId
from twinsched.des import SimEventKind, SimOutcome
from twinsched.emulator import Emulator, RunCommandServer, RunRejected
from twinsched.policies import PolicyConfig
from twinsched.stream import MemoryStream
from twinsched.twin import (Action, DesyncError, RecordingSink, ScoreConfig, SocketRunSink,
                            StaticController, Twin, score, select_policy)
from twinsched.workload import DEFAULT_PHASES, PhaseSpec, generate_synthetic

from oracles import random_jobs

WFP, FCFS, SJF = PolicyId.WFP, PolicyId.FCFS, PolicyId.SJF


def submit(job_id, t, nodes, wall):
    return Event(EventKind.SUBMIT, t, job_id, {"nodes": nodes, "walltime": wall})


def outcome(policy, mw=0.0, ms=0.0, aw=0.0, as_=0.0, starts=()):
    return SimOutcome(policy, mw, aw, ms, as_, immediate_starts=list(starts))


def completions(twin, job_id):
    return [e.time for e in twin.mirror.event_queue
            if e.kind is SimEventKind.COMPLETION and e.job_id == job_id]


# -- ingest ---------------------------------------------------------------

def test_run_then_early_end_pulls_completion_back():
    t = Twin(8)
    assert t.ingest_event(submit("J", 0, 2, 500)) is Action.SCHEDULE_NEEDED
    assert t.ingest_event(Event(EventKind.RUN, 100, "J")) is Action.NO_ACTION
    assert completions(t, "J") == [600] and t.predicted_end("J") == 600
    assert t.ingest_event(Event(EventKind.END, 450, "J")) is Action.SCHEDULE_NEEDED
    assert completions(t, "J") == [] and t.mirror.cluster.free_nodes == 8
    done = dict((j.job_id, j) for j, _ in t.mirror.completed)
    assert done["J"].end_time == 450 and t.mirror.clock == 450


def test_overdue_job_is_pushed_forward():
    t = Twin(8)
    t.ingest_event(submit("J", 0, 2, 100))
    t.ingest_event(Event(EventKind.RUN, 0, "J"))
    t.ingest_event(submit("K", 150, 1, 10))
    assert t.predicted_end("J") == 150 and completions(t, "J") == [150]
    t.ingest_event(Event(EventKind.END, 170, "J"))
    assert completions(t, "J") == []
    assert t.mirror.completed[0][0].end_time == 170


def test_submit_schedules():
    t = Twin(4)
    assert t.ingest_event(submit("K", 10, 1, 60)) is Action.SCHEDULE_NEEDED
    assert [j.job_id for j in t.mirror.wait_queue] == ["K"] and t.mirror.clock == 10


@pytest.mark.parametrize("events", [
    [Event(EventKind.END, 5, "ghost")],
    [Event(EventKind.RUN, 5, "ghost")],
    [submit("a", 0, 1, 5), Event(EventKind.END, 1, "a")],
    [submit("a", 0, 1, 5), submit("a", 1, 1, 5)],
    [submit("a", 5, 1, 5), submit("b", 4, 1, 5)],
])
def test_desync_errors(events):
    t = Twin(4)
    with pytest.raises(DesyncError):
        for e in events:
            t.ingest_event(e)


# -- what-if ---------------------------------------------------------------

def test_what_if_empty_queue():
    outs = Twin(8).what_if()
    assert [o.policy for o in outs] == [WFP, FCFS, SJF]
    assert all(o.metrics == {} and o.immediate_starts == [] for o in outs)


def test_what_if_identical_jobs():
    t = Twin(4)
    for i in range(6):
        t.ingest_event(submit(f"j{i}", 0, 2, 100))
    a, b, c = t.what_if()
    assert a.metrics == b.metrics == c.metrics
    assert score(a) == score(b) == score(c)


def test_what_if_sjf_beats_fcfs_on_blocking_mix():
    # large-long jobs queued ahead of short-small ones
    phases = [DEFAULT_PHASES[1], DEFAULT_PHASES[3]]
    jobs = generate_synthetic(phases, interarrival=0, seed=3)
    t = Twin(32)
    for j in jobs:
        t.ingest_event(Event.submit(j))
    by = {o.policy: o for o in t.what_if()}
    assert by[SJF].avg_wait < by[FCFS].avg_wait


def test_what_if_leaves_mirror_untouched():
    t = Twin(4)
    for i in range(5):
        t.ingest_event(submit(f"j{i}", i, 3, 50 + i))
    before = repr(t.mirror)
    t.what_if()
    assert repr(t.mirror) == before


# -- score and selection ----------------------------------------------------

def test_score_examples():
    assert score(outcome(FCFS, 100, 4, 40, 2)) == pytest.approx(36.5)
    assert score(outcome(FCFS)) == 0
    assert score(outcome(FCFS, 200, 8, 80, 4)) == pytest.approx(2 * 36.5)


@pytest.mark.parametrize("costs,want", [
    ({WFP: 10, FCFS: 20, SJF: 5}, SJF),
    ({WFP: 10, FCFS: 10, SJF: 10}, WFP),
    ({WFP: 10.0, FCFS: 9.999999999, SJF: 20}, WFP),
])
def test_select_examples(costs, want):
    cfg = ScoreConfig(1, 0, 0, 0)
    outs = [outcome(p, mw=c, starts=[(p.value, 1)]) for p, c in costs.items()]
    assert select_policy(outs, cfg) == (want, [(want.value, 1)])


def test_select_distinguishes_beyond_epsilon():
    cfg = ScoreConfig(1, 0, 0, 0)
    outs = [outcome(WFP, mw=10.0), outcome(FCFS, mw=9.99)]
    assert select_policy(outs, cfg)[0] is FCFS


def test_normalized_selection():
    cfg = ScoreConfig(normalize=True)
    outs = [outcome(WFP, 1000, 9, 500, 5), outcome(SJF, 1100, 2, 100, 1.5)]
    assert select_policy(outs, cfg)[0] is SJF
    assert select_policy(outs, ScoreConfig())[0] is SJF


metric = st.floats(0, 1e5, allow_nan=False)


@given(st.lists(st.tuples(metric, metric, metric, metric), min_size=3, max_size=3),
       st.floats(0.01, 100), st.permutations([WFP, FCFS, SJF]))
def test_weight_scaling_preserves_choice(rows, c, order):
    outs = [outcome(p, *r) for p, r in zip(order, rows)]
    base = ScoreConfig(0.25, 0.25, 0.25, 0.25, tie_epsilon=1e-6)
    scaled = ScoreConfig(0.25 * c, 0.25 * c, 0.25 * c, 0.25 * c, tie_epsilon=1e-6)
    a, b = select_policy(outs, base)[0], select_policy(outs, scaled)[0]
    costs = sorted(score(o, base) for o in outs)
    # only compare when the winner is not borderline for the tolerance
    if len(costs) < 2 or costs[1] - costs[0] > 1e-5 * max(1.0, costs[1]):
        assert a is b


def test_score_config_validation():
    with pytest.raises(Exception):
        ScoreConfig(0, 0, 0, 0)
    with pytest.raises(Exception):
        ScoreConfig(-1, 1, 1, 1)
    cfg = ScoreConfig(1, 2, 3, 4, (SJF, WFP, FCFS), 1e-6, True)
    assert ScoreConfig.from_dict(cfg.to_dict()) == cfg


# -- cycle -----------------------------------------------------------------

def test_run_event_cycle_returns_nothing():
    t = Twin(4)
    t.ingest_event(submit("a", 0, 4, 10))
    sink = RecordingSink()
    assert t.cycle(Event(EventKind.RUN, 0, "a"), sink) == [] and sink.commands == []


def test_forced_decision_goes_to_tie_order_head():
    t = Twin(4)
    t.ingest_event(submit("r", 0, 4, 100))
    t.ingest_event(Event(EventKind.RUN, 0, "r"))
    t.ingest_event(submit("w", 5, 4, 50))
    sink = RecordingSink()
    assert t.cycle(Event(EventKind.END, 40, "r"), sink) == [("w", WFP)]
    assert sink.commands == ["w"] and t.last_decisions == [("w", WFP)]
    # the later run event confirms the optimistic start
    assert t.cycle(Event(EventKind.RUN, 40, "w"), sink) == []


def test_decisions_fit_free_nodes():
    rng = random.Random(7)
    jobs = random_jobs(rng, 40, 8, max_submit=400)
    stream = MemoryStream()
    emu = Emulator(8, jobs, stream)
    t = Twin(8, status_source=emu.snapshot_authoritative)

    class CheckingSink:
        def run(self, job_id):
            # the start is already applied to the mirror; accounting must still hold
            assert job_id in t.mirror.cluster.allocations
            assert t.mirror.cluster.is_consistent()
            emu.run(job_id)

    cursor = 0
    while emu.advance() is not None:
        while (rec := stream.read_blocking(cursor)) is not None:
            cursor += 1
            t.cycle(rec.event, CheckingSink())
    started = [j for j, _ in t.last_decisions]
    assert sorted(started) == sorted(j.job_id for j in jobs)
    counts = {}
    for _, p in t.last_decisions:
        counts[p] = counts.get(p, 0) + 1
    assert sum(counts.values()) == len(jobs)


def test_transport_failure_retried_once():
    class Flaky:
        def __init__(self, failures):
            self.failures, self.calls = failures, 0

        def run(self, job_id):
            self.calls += 1
            if self.calls <= self.failures:
                raise ConnectionError("down")

    for failures, emitted in ((1, True), (2, False)):
        t = Twin(4)
        t.ingest_event(submit("a", 0, 1, 10))
        sink = Flaky(failures)
        out = t.schedule(sink)
        assert bool(out) is emitted and sink.calls == 2
        assert ("a" in t.mirror.cluster.allocations) is emitted


def test_rejected_command_undone_and_resynced():
    stream = MemoryStream()
    emu = Emulator(4, [Job("a", 0, 4, 10, true_runtime=10)], stream)
    emu.advance()
    emu.execute_run("a")        # started behind the twin's back
    t = Twin(4, status_source=emu.snapshot_authoritative)
    t.ingest_event(stream.read_blocking(0).event)
    assert t.schedule(emu) == []
    assert t.resyncs == 1 and t.mirror.cluster.allocations["a"].nodes == 4


# -- resync ----------------------------------------------------------------

def _mirror_view(t):
    m = t.mirror
    return ({k: (a.nodes, a.start_time) for k, a in m.cluster.allocations.items()},
            sorted(j.job_id for j in m.wait_queue), m.cluster.free_nodes)


def _truth_view(emu):
    c, waiting = emu.snapshot_authoritative()
    return ({k: (a.nodes, a.start_time) for k, a in c.allocations.items()},
            sorted(j.job_id for j in waiting), c.free_nodes)


def test_resync_idempotent():
    t = Twin(8)
    t.ingest_event(submit("a", 0, 2, 100))
    t.ingest_event(Event(EventKind.RUN, 0, "a"))
    t.ingest_event(submit("b", 5, 8, 100))
    before = repr(t.mirror)
    t.resync(t.mirror.cluster.copy(), list(t.mirror.wait_queue))
    assert repr(t.mirror) == before and t.resyncs == 0


def test_resync_adopts_missed_job():
    t = Twin(8)
    t.ingest_event(submit("a", 0, 2, 100))
    truth = ClusterState(8, clock=20)
    truth.allocate("a", 2, 10, 110)
    t.resync(truth, [])
    assert t.mirror.cluster.allocations["a"].predicted_end == 110
    assert t.mirror.cluster.free_nodes == 6 and t.mirror.clock == 20
    assert [e.time for e in t.mirror.event_queue] == [110]


def test_resync_clamps_overdue_prediction():
    t = Twin(8)
    truth = ClusterState(8, clock=500)
    truth.allocate("x", 3, 0, 100)
    t.resync(truth, [Job("w", 400, 1, 10)])
    assert t.mirror.cluster.allocations["x"].predicted_end == 500
    t.mirror.check()


def test_resync_rejects_inconsistent_snapshot():
    t = Twin(4)
    t.ingest_event(submit("a", 0, 1, 10))
    before = repr(t.mirror)
    bad = ClusterState(4, free_nodes=3, clock=1)  # free count does not match allocations
    with pytest.raises(DesyncError):
        t.resync(bad, [])
    assert repr(t.mirror) == before


@pytest.mark.parametrize("seed", range(8))
def test_event_loss_then_resync_matches_truth(seed):
    rng = random.Random(seed)
    jobs = random_jobs(rng, 40, 8, max_submit=300)
    stream = MemoryStream()
    emu = Emulator(8, jobs, stream)
    t = Twin(8, status_source=emu.snapshot_authoritative)
    cursor = 0
    steps = 0
    stop = rng.randint(20, 70)
    while steps < stop and emu.advance() is not None:
        steps += 1
        while (rec := stream.read_blocking(cursor)) is not None:
            cursor += 1
            if rng.random() < 0.05:
                continue
            t.cycle(rec.event, emu)
    t.resync_from_source()
    assert _mirror_view(t) == _truth_view(emu)
    t.mirror.check()


# -- parallel execution ------------------------------------------------------

def test_thread_and_process_pools_agree_with_serial():
    jobs = generate_synthetic([PhaseSpec(20, (1, 8), (10, 200))], interarrival=0, seed=1)
    outs = []
    for kw in ({}, {"workers": 3}, {"workers": 3, "parallel": "process"}):
        with Twin(8, **kw) as t:
            for j in jobs:
                t.ingest_event(Event.submit(j))
            outs.append(t.what_if())
    assert outs[0] == outs[1] == outs[2]


def test_pool_order_independent_of_completion_order():
    import twinsched.twin as tw

    real = tw._simulate

    def slow(args):
        # make the first pool member finish last
        if args[1].id is WFP:
            time.sleep(0.05)
        return real(args)

    tw._simulate = slow
    try:
        with Twin(4, workers=3) as t:
            t.ingest_event(submit("a", 0, 1, 5))
            assert [o.policy for o in t.what_if()] == [WFP, FCFS, SJF]
    finally:
        tw._simulate = real


# -- static controller and socket sink ------------------------------------------

def test_static_controller_uses_single_instance():
    s = StaticController(4, "SJF")
    s.ingest_event(submit("a", 0, 4, 100))
    s.ingest_event(submit("b", 0, 4, 10))
    sink = RecordingSink()
    assert s.schedule(sink) == [("b", SJF)]


def test_socket_run_sink_round_trip():
    stream = MemoryStream()
    emu = Emulator(4, [Job("a", 0, 3, 10, true_runtime=5), Job("b", 0, 3, 10, true_runtime=5)],
                   stream)
    emu.advance()
    emu.advance()
    server = RunCommandServer(emu)
    sink = SocketRunSink(server.address)
    try:
        sink.run("a")
        with pytest.raises(RunRejected):
            sink.run("b")
        assert server.handle_line("bogus").startswith("ERROR")
    finally:
        sink.close()
        server.close()
    assert "a" in emu.cluster.allocations
