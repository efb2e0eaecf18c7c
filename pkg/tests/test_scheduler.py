from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expd import errors
from expd.model import HardwareOffer, HardwareSpec, RunConfig, TaskState, satisfies
from expd.scheduler import Scheduler, SchedulerConfig

from scheduler_sim import FakeClock, simulate


def make(snapshots=frozenset({"s" * 64}), **cfg):
    clock = FakeClock()
    kills = []
    s = Scheduler(SchedulerConfig(**cfg), clock, lambda z, sid: sid in snapshots,
                  on_kill=lambda e, t: kills.append((e, t)))
    return s, clock, kills


def run_cfg(accel=0, typ=None, cpu=1, mem=256, sid="s" * 64):
    return RunConfig(("true",), sid, hardware=HardwareSpec(typ if accel else None, accel, cpu, mem))


def offer(eid, accel=0, typ=None, cpu=8, mem=64000):
    return HardwareOffer(eid, typ, accel, cpu, mem)


def test_config_validation():
    with pytest.raises(errors.ValidationError):
        SchedulerConfig(lease_seconds=5, heartbeat_seconds=5)
    c = SchedulerConfig()
    assert (c.lease_seconds, c.heartbeat_seconds, c.max_retries) == (15, 5, 2)


def test_submit():
    s, clock, _ = make()
    tid = s.submit_task(run_cfg())
    assert s.tasks[tid].state is TaskState.QUEUED and s.tasks[tid].submit_time == clock.now
    with pytest.raises(errors.SnapshotNotFound):
        s.submit_task(run_cfg(sid="0" * 64))
    clock.now += 1
    t2 = s.submit_task(run_cfg())
    assert t2 != tid and [t.task_id for t in s.queued()] == [tid, t2]


def test_fifo_tiebreak_on_equal_submit_time():
    s, _, _ = make()
    ids = [s.submit_task(run_cfg(), task_id=x) for x in ["b", "a", "c"]]
    assert [t.task_id for t in s.queued()] == sorted(ids)


def test_register_and_reregister():
    s, _, _ = make()
    assert s.register_executor(offer("e1", 1, "A100")) == "e1"
    assert s.executors["e1"].idle
    s.register_executor(offer("e1", 2, "A100"))
    assert s.executors["e1"].offer.accel_count == 2


def test_register_then_match_assigns_waiting_task():
    s, _, _ = make()
    tid = s.submit_task(run_cfg(1, "A100"))
    assert s.match_tasks() == []
    s.register_executor(offer("e1", 1, "A100"))
    assert [(a.task_id, a.executor_id) for a in s.match_tasks()] == [(tid, "e1")]


def test_heartbeat_and_leases():
    s, clock, _ = make()
    s.register_executor(offer("e1"))
    clock.now += 10
    s.heartbeat("e1")
    clock.now += 10
    assert s.check_leases() == []
    tid = s.submit_task(run_cfg())
    s.match_tasks()
    s.claim("e1")
    s.begin_run(tid, "e1")
    clock.now += 16
    assert s.check_leases() == ["e1"]
    rec = s.tasks[tid]
    assert rec.state is TaskState.QUEUED and rec.retries_used == 1
    assert not s.executors["e1"].connected
    with pytest.raises(errors.UnknownExecutor):
        s.heartbeat("nope")


def test_best_fit_example():
    s, _, _ = make()
    s.register_executor(offer("big", 2, "A100"))
    s.register_executor(offer("small", 1, "A100"))
    tid = s.submit_task(run_cfg(1, "A100"))
    assert [(a.task_id, a.executor_id) for a in s.match_tasks()] == [(tid, "small")]


def test_no_feasible_offer():
    s, _, _ = make()
    s.register_executor(offer("e", 2, "A100"))
    tid = s.submit_task(run_cfg(4, "A100"))
    assert s.match_tasks() == [] and s.tasks[tid].state is TaskState.QUEUED


def test_fifo_one_executor():
    s, clock, _ = make()
    t1 = s.submit_task(run_cfg())
    clock.now += 1
    s.submit_task(run_cfg())
    s.register_executor(offer("e"))
    assert [a.task_id for a in s.match_tasks()] == [t1]


def brute_best(offers: list[HardwareOffer], spec: HardwareSpec):
    feasible = [o for o in offers if satisfies(o, spec)]
    if not feasible:
        return None
    best = feasible[0]
    for o in feasible[1:]:
        a = (o.accel_count - spec.accel_count, o.memory_mb - spec.memory_mb, o.executor_id)
        b = (best.accel_count - spec.accel_count, best.memory_mb - spec.memory_mb, best.executor_id)
        if a < b:
            best = o
    return best.executor_id


offers_st = st.lists(
    st.tuples(st.integers(0, 4), st.sampled_from(["A100", "V100"]), st.integers(1, 16),
              st.sampled_from([8000, 16000, 32000, 64000])),
    min_size=1, max_size=6,
)


@settings(max_examples=200)
@given(offers_st, st.integers(0, 3), st.sampled_from(["A100", "V100"]), st.integers(1, 8),
       st.sampled_from([4000, 16000, 32000]))
def test_best_fit_matches_brute_force(raw, accel, typ, cpu, mem):
    s, _, _ = make()
    offers = [HardwareOffer(f"e{i}", t if n else None, n, c, m) for i, (n, t, c, m) in enumerate(raw)]
    for o in offers:
        s.register_executor(o)
    spec = HardwareSpec(typ if accel else None, accel, cpu, mem)
    s.submit_task(RunConfig(("x",), "s" * 64, hardware=spec))
    got = s.match_tasks()
    expected = brute_best(offers, spec)
    assert (got[0].executor_id if got else None) == expected


def test_match_never_double_books():
    s, _, _ = make()
    s.register_executor(offer("e"))
    for _ in range(3):
        s.submit_task(run_cfg())
    assert len(s.match_tasks()) == 1
    assert s.match_tasks() == []


def test_claim_exactly_once():
    s, _, _ = make()
    s.register_executor(offer("e"))
    assert s.claim("e") is None
    tid = s.submit_task(run_cfg())
    s.match_tasks()
    rec = s.claim("e")
    assert rec.task_id == tid and rec.state is TaskState.PREPARING
    assert s.claim("e") is None
    with pytest.raises(errors.UnknownExecutor):
        s.claim("ghost")


def test_cancel():
    s, _, kills = make()
    t_queued = s.submit_task(run_cfg())
    assert s.cancel_task(t_queued).state is TaskState.CANCELED
    s.register_executor(offer("e"))
    assert s.match_tasks() == []
    t_run = s.submit_task(run_cfg())
    s.match_tasks()
    s.claim("e")
    s.begin_run(t_run, "e")
    assert s.cancel_task(t_run).state is TaskState.CANCELED
    assert kills == [("e", t_run)] and s.executors["e"].idle
    done = s.submit_task(run_cfg())
    s.match_tasks()
    s.claim("e")
    s.begin_run(done, "e")
    s.record_result(done, "e", 0)
    with pytest.raises(errors.AlreadyTerminal):
        s.cancel_task(done)
    with pytest.raises(errors.UnknownTask):
        s.cancel_task("nope")


def running(s, eid="e"):
    s.register_executor(offer(eid))
    tid = s.submit_task(run_cfg())
    s.match_tasks()
    s.claim(eid)
    s.begin_run(tid, eid)
    return tid


def test_record_result():
    s, _, _ = make()
    tid = running(s)
    assert s.record_result(tid, "e", 0).state is TaskState.SUCCEEDED
    assert s.executors["e"].idle
    t2 = s.submit_task(run_cfg())
    s.match_tasks()
    s.claim("e")
    s.begin_run(t2, "e")
    r = s.record_result(t2, "e", 3)
    assert r.state is TaskState.FAILED and r.exit_code == 3
    t3 = s.submit_task(run_cfg())
    s.match_tasks()
    s.claim("e")
    s.begin_run(t3, "e")
    s.register_executor(offer("other"))
    with pytest.raises(errors.WrongExecutor):
        s.record_result(t3, "other", 0)
    s.record_result(t3, "e", 0)
    with pytest.raises(errors.IllegalTransition):
        s.record_result(t3, "e", 0)
    with pytest.raises(errors.UnknownTask):
        s.record_result("nope", "e", 0)


def test_reregister_busy_executor_requeues():
    s, _, _ = make()
    tid = running(s)
    s.register_executor(offer("e"))
    rec = s.tasks[tid]
    assert rec.state is TaskState.QUEUED and rec.retries_used == 1


def test_requeue_keeps_submit_time_and_queue_position():
    s, clock, _ = make()
    first = running(s)
    t0 = s.tasks[first].submit_time
    clock.now += 5
    later = s.submit_task(run_cfg())
    s.disconnect_executor("e")
    s.register_executor(offer("e2"))
    assert s.tasks[first].submit_time == t0
    assert [a.task_id for a in s.match_tasks()] == [first]
    assert s.tasks[later].state is TaskState.QUEUED


def test_fail_prepare():
    s, _, _ = make()
    s.register_executor(offer("e"))
    tid = s.submit_task(run_cfg())
    s.match_tasks()
    s.claim("e")
    r = s.fail_prepare(tid, "e")
    assert r.state is TaskState.FAILED and r.failure_phase.value == "PREPARE" and s.executors["e"].idle


def test_liveness_single_pass():
    rng = random.Random(1)
    for _ in range(100):
        s, _, _ = make()
        for i in range(rng.randint(1, 4)):
            s.register_executor(offer(f"e{i}", rng.randint(0, 2), "A100", 8, 32000))
        for _ in range(rng.randint(1, 4)):
            s.submit_task(run_cfg(rng.randint(0, 2), "A100", 1, 1000))
        fits = any(satisfies(ex.offer, t.run_config.hardware)
                   for ex, t in itertools.product(s.executors.values(), s.queued()))
        if fits:
            assert s.match_tasks()


@pytest.mark.parametrize("seed", range(20))
def test_simulation_without_failures(seed):
    res = simulate(seed, crash=False)
    assert res.violations == []


@pytest.mark.parametrize("seed", range(20))
def test_simulation_with_crash(seed):
    res = simulate(seed, crash=True)
    assert res.violations == []
