from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expd import canonical, errors
from expd.model import (
    ACTIVE_STATES,
    ALLOWED_EDGES,
    STATE_GRAPH,
    TERMINAL_STATES,
    Assign,
    BeginPrepare,
    BeginRun,
    Cancel,
    ExecutorLost,
    Fail,
    FailurePhase,
    Finish,
    HardwareOffer,
    HardwareSpec,
    MountSpec,
    RunConfig,
    TaskRecord,
    TaskState,
    check_record,
    event_from_dict,
    event_to_dict,
    is_legal,
    satisfies,
    transition,
    validate_run_config,
)

from conftest import cfg


def test_minimal_config_is_valid():
    c = RunConfig(("true",), "s" * 64, hardware=HardwareSpec(None, 0, 1, 256))
    assert validate_run_config(c) is c


def test_empty_command():
    with pytest.raises(errors.EmptyCommand):
        validate_run_config(RunConfig((), "s"))


def test_duplicate_mount_target():
    mounts = (MountSpec("data", "", "data"), MountSpec("data", "v2/", "data"))
    with pytest.raises(errors.MountTargetConflict):
        validate_run_config(RunConfig(("true",), "s", mounts=mounts))


@pytest.mark.parametrize("target", ["../x", "a/../b", "/abs", "", "a//b", "."])
def test_bad_mount_targets(target):
    with pytest.raises(errors.MountTargetConflict):
        validate_run_config(RunConfig(("true",), "s", mounts=(MountSpec("b", "", target),)))


def test_env_rules():
    with pytest.raises(errors.DuplicateEnvName):
        validate_run_config(RunConfig(("true",), "s", env=(("A", "1"), ("A", "2"))))
    with pytest.raises(errors.InvalidEnvName):
        validate_run_config(RunConfig(("true",), "s", env=(("1A", "x"),)))
    validate_run_config(RunConfig(("true",), "s", env=(("_a1", "x"), ("B", ""))))


def test_missing_accel_type():
    with pytest.raises(errors.MissingAccelType):
        validate_run_config(RunConfig(("true",), "s", hardware=HardwareSpec(None, 1)))


def test_run_config_round_trip_keeps_env_order():
    c = RunConfig(("python", "t.py"), "abc", env=(("Z", "1"), ("A", "2")),
                  setup_command=("pip", "install"), mounts=(MountSpec("d", "v1/", "data"),),
                  hardware=HardwareSpec("A100", 2, 4, 1024))
    back = RunConfig.from_dict(canonical.loads(canonical.dumps(c.to_dict())))
    assert back == c


def offer(count=0, typ=None, cpu=1, mem=256, eid="e"):
    return HardwareOffer(eid, typ, count, cpu, mem)


def test_satisfies_examples():
    assert satisfies(offer(2, "A100", 8, 64000), HardwareSpec("A100", 1, 4, 32000))
    assert not satisfies(offer(2, "V100", 8, 64000), HardwareSpec("A100", 1, 4, 32000))
    assert satisfies(offer(0, None, 8, 64000), HardwareSpec(None, 0, 8, 64000))


def test_satisfies_ignores_type_without_accelerators():
    assert satisfies(offer(4, "H100", 2, 512), HardwareSpec(None, 0, 1, 256))


names = st.sampled_from(["A100", "V100", None])


@given(
    count=st.integers(0, 8), cpu=st.integers(1, 64), mem=st.integers(1, 1 << 17), typ=names,
    scount=st.integers(0, 8), scpu=st.integers(1, 64), smem=st.integers(1, 1 << 17), styp=names,
    bump=st.sampled_from(["count", "cpu", "mem"]), by=st.integers(1, 100),
)
def test_satisfies_is_monotone(count, cpu, mem, typ, scount, scpu, smem, styp, bump, by):
    if count and typ is None:
        typ = "A100"
    if scount and styp is None:
        styp = "A100"
    spec = HardwareSpec(styp, scount, scpu, smem)
    o = offer(count, typ, cpu, mem)
    bigger = offer(count + by * (bump == "count"), typ, cpu + by * (bump == "cpu"), mem + by * (bump == "mem"))
    if satisfies(o, spec):
        assert satisfies(bigger, spec)


def rec(state=TaskState.QUEUED, **kw) -> TaskRecord:
    return TaskRecord("t1", cfg(), state=state, **kw)


def test_transition_examples():
    assert transition(rec(), Cancel(), 1.0).state is TaskState.CANCELED
    with pytest.raises(errors.IllegalTransition):
        transition(rec(TaskState.SUCCEEDED, exit_code=0), Cancel(), 1.0)
    r = transition(rec(TaskState.RUNNING, executor_id="e"), ExecutorLost(), 1.0, max_retries=2)
    assert r.state is TaskState.QUEUED and r.retries_used == 1 and r.executor_id is None


def test_executor_lost_exhausts_budget():
    r = rec(TaskState.RUNNING, executor_id="e", retries_used=2)
    out = transition(r, ExecutorLost(), 5.0, max_retries=2)
    assert out.state is TaskState.FAILED
    assert out.failure_phase is FailurePhase.EXECUTOR_LOST
    assert out.retries_used == 3 and out.exit_code is None and out.end_time == 5.0


def test_happy_path_timestamps():
    r = rec(submit_time=1.0)
    r = transition(r, Assign("e"), 2.0)
    r = transition(r, BeginPrepare(), 3.0)
    r = transition(r, BeginRun(), 4.0)
    assert r.start_time == 4.0 and r.end_time is None
    r = transition(r, Finish(0), 5.0)
    assert (r.state, r.exit_code, r.end_time) == (TaskState.SUCCEEDED, 0, 5.0)
    check_record(r)


def test_fail_only_in_prepare_phase():
    p = rec(TaskState.PREPARING, executor_id="e")
    assert transition(p, Fail(FailurePhase.PREPARE), 1.0).state is TaskState.FAILED
    assert not is_legal(TaskState.PREPARING, Fail(FailurePhase.RUN))


def test_nonzero_finish_is_run_failure():
    r = transition(rec(TaskState.RUNNING, executor_id="e"), Finish(3), 1.0)
    assert r.state is TaskState.FAILED and r.exit_code == 3 and r.failure_phase is FailurePhase.RUN


def test_event_dict_round_trip():
    for ev in [Assign("x"), BeginPrepare(), BeginRun(), Finish(7), Fail(FailurePhase.PREPARE), Cancel(),
               ExecutorLost()]:
        assert event_from_dict(canonical.loads(canonical.dumps(event_to_dict(ev)))) == ev


events = st.one_of(
    st.builds(Assign, st.sampled_from(["e1", "e2"])),
    st.just(BeginPrepare()),
    st.just(BeginRun()),
    st.builds(Finish, st.integers(0, 3)),
    st.builds(Fail, st.sampled_from(list(FailurePhase))),
    st.just(Cancel()),
    st.just(ExecutorLost()),
)


@settings(max_examples=300)
@given(st.lists(events, max_size=30), st.integers(0, 3))
def test_random_event_sequences_walk_the_graph(seq, max_retries):
    r = rec()
    for i, ev in enumerate(seq):
        legal = (r.state, type(ev)) in ALLOWED_EDGES and (
            not isinstance(ev, Fail) or ev.phase is FailurePhase.PREPARE
        )
        if not legal:
            with pytest.raises(errors.IllegalTransition):
                transition(r, ev, float(i), max_retries)
            continue
        new = transition(r, ev, float(i), max_retries)
        assert (r.state, new.state) in STATE_GRAPH
        assert new.submit_time == r.submit_time
        check_record(new)
        r = new


@given(events)
def test_terminal_states_absorb(ev):
    for state in TERMINAL_STATES:
        kw = {"exit_code": 0} if state is TaskState.SUCCEEDED else {}
        with pytest.raises(errors.IllegalTransition):
            transition(rec(state, **kw), ev, 1.0)


def test_requeue_edges_only_from_active_states():
    into_queued = {a for a, b in STATE_GRAPH if b is TaskState.QUEUED}
    assert into_queued == set(ACTIVE_STATES)


def test_task_record_round_trip():
    r = rec(TaskState.FAILED, executor_id="e", exit_code=2, failure_phase=FailurePhase.RUN, end_time=3.5)
    assert TaskRecord.from_dict(canonical.loads(canonical.dumps(r.to_dict()))) == r


def test_canonical_form():
    assert canonical.dumps({"b": 1, "a": [1, "é"]}) == '{"a":[1,"é"],"b":1}'
    assert canonical.dumpb({"a": "é"}) == '{"a":"é"}'.encode("utf-8")
