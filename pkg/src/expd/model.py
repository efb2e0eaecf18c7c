"""Run configuration, hardware vocabulary and the task lifecycle state machine.

Everything here is an immutable value; ``transition`` returns a new record.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional, Union

from expd import errors

_ENV_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

DEFAULT_MAX_RETRIES = 2


class TaskState(str, Enum):
    QUEUED = "QUEUED"
    ASSIGNED = "ASSIGNED"
    PREPARING = "PREPARING"
    RUNNING = "RUNNING"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    CANCELED = "CANCELED"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATES


TERMINAL_STATES = frozenset({TaskState.SUCCEEDED, TaskState.FAILED, TaskState.CANCELED})
ACTIVE_STATES = frozenset({TaskState.ASSIGNED, TaskState.PREPARING, TaskState.RUNNING})


class FailurePhase(str, Enum):
    PREPARE = "PREPARE"
    RUN = "RUN"
    EXECUTOR_LOST = "EXECUTOR_LOST"


def _check_capacity(accel_type: Optional[str], accel_count: int, cpu_cores: int, memory_mb: int) -> None:
    for name, value in (("accel_count", accel_count), ("cpu_cores", cpu_cores), ("memory_mb", memory_mb)):
        if not isinstance(value, int) or isinstance(value, bool):
            raise errors.InvalidHardware(f"{name} must be an integer, got {value!r}")
    if accel_count < 0:
        raise errors.InvalidHardware("accel_count must be non-negative")
    if cpu_cores <= 0:
        raise errors.InvalidHardware("cpu_cores must be positive")
    if memory_mb <= 0:
        raise errors.InvalidHardware("memory_mb must be positive")
    if accel_count > 0 and not accel_type:
        raise errors.MissingAccelType("accel_count > 0 requires accel_type")


@dataclass(frozen=True)
class HardwareSpec:
    accel_type: Optional[str] = None
    accel_count: int = 0
    cpu_cores: int = 1
    memory_mb: int = 256

    def validate(self) -> None:
        _check_capacity(self.accel_type, self.accel_count, self.cpu_cores, self.memory_mb)

    def to_dict(self) -> dict[str, Any]:
        return {
            "accel_type": self.accel_type,
            "accel_count": self.accel_count,
            "cpu_cores": self.cpu_cores,
            "memory_mb": self.memory_mb,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HardwareSpec":
        return cls(d.get("accel_type"), d["accel_count"], d["cpu_cores"], d["memory_mb"])


@dataclass(frozen=True)
class HardwareOffer:
    executor_id: str
    accel_type: Optional[str] = None
    accel_count: int = 0
    cpu_cores: int = 1
    memory_mb: int = 256
    zone: str = "local"

    def validate(self) -> None:
        _check_capacity(self.accel_type, self.accel_count, self.cpu_cores, self.memory_mb)
        if not self.zone:
            raise errors.InvalidHardware("zone must be non-empty")
        if not self.executor_id:
            raise errors.InvalidHardware("executor_id must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "executor_id": self.executor_id,
            "accel_type": self.accel_type,
            "accel_count": self.accel_count,
            "cpu_cores": self.cpu_cores,
            "memory_mb": self.memory_mb,
            "zone": self.zone,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HardwareOffer":
        return cls(
            d["executor_id"], d.get("accel_type"), d["accel_count"], d["cpu_cores"], d["memory_mb"], d["zone"]
        )


@dataclass(frozen=True)
class MountSpec:
    bucket: str
    prefix: str
    target: str
    read_only: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {"bucket": self.bucket, "prefix": self.prefix, "target": self.target, "read_only": self.read_only}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MountSpec":
        return cls(d["bucket"], d["prefix"], d["target"], d.get("read_only", True))


@dataclass(frozen=True)
class RunConfig:
    command: tuple[str, ...]
    workdir_snapshot: str
    env: tuple[tuple[str, str], ...] = ()
    setup_command: Optional[tuple[str, ...]] = None
    mounts: tuple[MountSpec, ...] = ()
    hardware: HardwareSpec = field(default_factory=HardwareSpec)

    def to_dict(self) -> dict[str, Any]:
        # env is serialized as a pair list to keep its declared order.
        return {
            "command": list(self.command),
            "workdir_snapshot": self.workdir_snapshot,
            "env": [[k, v] for k, v in self.env],
            "setup_command": list(self.setup_command) if self.setup_command is not None else None,
            "mounts": [m.to_dict() for m in self.mounts],
            "hardware": self.hardware.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        setup = d.get("setup_command")
        return cls(
            command=tuple(d["command"]),
            workdir_snapshot=d["workdir_snapshot"],
            env=tuple((k, v) for k, v in d.get("env", [])),
            setup_command=tuple(setup) if setup is not None else None,
            mounts=tuple(MountSpec.from_dict(m) for m in d.get("mounts", [])),
            hardware=HardwareSpec.from_dict(d["hardware"]),
        )


def check_relative_path(path: str) -> bool:
    if not path or path.startswith("/") or "\\" in path or "\0" in path:
        return False
    return all(seg not in ("", ".", "..") for seg in path.split("/"))


def validate_run_config(cfg: RunConfig) -> RunConfig:
    """Return ``cfg`` unchanged if every invariant holds, else raise."""
    if not cfg.command:
        raise errors.EmptyCommand("command must contain at least one token")
    seen: set[str] = set()
    for name, _ in cfg.env:
        if not _ENV_NAME_RE.match(name):
            raise errors.InvalidEnvName(f"invalid environment variable name {name!r}")
        if name in seen:
            raise errors.DuplicateEnvName(f"environment variable {name!r} declared twice")
        seen.add(name)
    if cfg.setup_command is not None and not cfg.setup_command:
        raise errors.EmptyCommand("setup_command, when given, must be non-empty")
    targets: list[str] = []
    for m in cfg.mounts:
        if not check_relative_path(m.target):
            raise errors.MountTargetConflict(f"mount target {m.target!r} must be relative without '..'")
        if m.target in targets:
            raise errors.MountTargetConflict(f"mount target {m.target!r} used twice")
        for other in targets:
            if m.target.startswith(other + "/") or other.startswith(m.target + "/"):
                raise errors.MountTargetConflict(f"mount targets {other!r} and {m.target!r} nest")
        if not m.bucket:
            raise errors.InvalidKey("mount bucket must be non-empty")
        targets.append(m.target)
    cfg.hardware.validate()
    return cfg


def satisfies(offer: HardwareOffer, spec: HardwareSpec) -> bool:
    return (
        offer.accel_count >= spec.accel_count
        and offer.cpu_cores >= spec.cpu_cores
        and offer.memory_mb >= spec.memory_mb
        and (spec.accel_count == 0 or offer.accel_type == spec.accel_type)
    )


# Lifecycle events.

@dataclass(frozen=True)
class Assign:
    executor_id: str


@dataclass(frozen=True)
class BeginPrepare:
    pass


@dataclass(frozen=True)
class BeginRun:
    pass


@dataclass(frozen=True)
class Finish:
    exit_code: int


@dataclass(frozen=True)
class Fail:
    phase: FailurePhase


@dataclass(frozen=True)
class Cancel:
    pass


@dataclass(frozen=True)
class ExecutorLost:
    pass


LifecycleEvent = Union[Assign, BeginPrepare, BeginRun, Finish, Fail, Cancel, ExecutorLost]

_EVENT_NAMES = {
    Assign: "assign",
    BeginPrepare: "begin_prepare",
    BeginRun: "begin_run",
    Finish: "finish",
    Fail: "fail",
    Cancel: "cancel",
    ExecutorLost: "executor_lost",
}


def event_to_dict(event: LifecycleEvent) -> dict[str, Any]:
    d: dict[str, Any] = {"type": _EVENT_NAMES[type(event)]}
    if isinstance(event, Assign):
        d["executor_id"] = event.executor_id
    elif isinstance(event, Finish):
        d["exit_code"] = event.exit_code
    elif isinstance(event, Fail):
        d["phase"] = event.phase.value
    return d


def event_from_dict(d: dict[str, Any]) -> LifecycleEvent:
    kind = d["type"]
    if kind == "assign":
        return Assign(d["executor_id"])
    if kind == "finish":
        return Finish(int(d["exit_code"]))
    if kind == "fail":
        return Fail(FailurePhase(d["phase"]))
    simple = {"begin_prepare": BeginPrepare, "begin_run": BeginRun, "cancel": Cancel, "executor_lost": ExecutorLost}
    if kind not in simple:
        raise ValueError(f"unknown lifecycle event {kind!r}")
    return simple[kind]()


@dataclass(frozen=True)
class TaskRecord:
    task_id: str
    run_config: RunConfig
    state: TaskState = TaskState.QUEUED
    executor_id: Optional[str] = None
    submit_time: float = 0.0
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    exit_code: Optional[int] = None
    retries_used: int = 0
    failure_phase: Optional[FailurePhase] = None
    # provenance beyond the lifecycle: where the inputs were uploaded and
    # which local workspace launched the run
    origin_zone: str = "local"
    workspace: str = ""

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "run_config": self.run_config.to_dict(),
            "state": self.state.value,
            "executor_id": self.executor_id,
            "submit_time": self.submit_time,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "exit_code": self.exit_code,
            "retries_used": self.retries_used,
            "failure_phase": self.failure_phase.value if self.failure_phase else None,
            "origin_zone": self.origin_zone,
            "workspace": self.workspace,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TaskRecord":
        phase = d.get("failure_phase")
        return cls(
            task_id=d["task_id"],
            run_config=RunConfig.from_dict(d["run_config"]),
            state=TaskState(d["state"]),
            executor_id=d.get("executor_id"),
            submit_time=d["submit_time"],
            start_time=d.get("start_time"),
            end_time=d.get("end_time"),
            exit_code=d.get("exit_code"),
            retries_used=d.get("retries_used", 0),
            failure_phase=FailurePhase(phase) if phase else None,
            origin_zone=d.get("origin_zone", "local"),
            workspace=d.get("workspace", ""),
        )


# (state, event type) -> allowed. Finish/ExecutorLost resolve their target
# state from the payload and the retry budget.
ALLOWED_EDGES: frozenset[tuple[TaskState, type]] = frozenset(
    {
        (TaskState.QUEUED, Assign),
        (TaskState.QUEUED, Cancel),
        (TaskState.ASSIGNED, BeginPrepare),
        (TaskState.ASSIGNED, Cancel),
        (TaskState.ASSIGNED, ExecutorLost),
        (TaskState.PREPARING, BeginRun),
        (TaskState.PREPARING, Fail),
        (TaskState.PREPARING, Cancel),
        (TaskState.PREPARING, ExecutorLost),
        (TaskState.RUNNING, Finish),
        (TaskState.RUNNING, Cancel),
        (TaskState.RUNNING, ExecutorLost),
    }
)

# Every state-to-state edge any event can produce.
STATE_GRAPH: frozenset[tuple[TaskState, TaskState]] = frozenset(
    {
        (TaskState.QUEUED, TaskState.ASSIGNED),
        (TaskState.ASSIGNED, TaskState.PREPARING),
        (TaskState.PREPARING, TaskState.RUNNING),
        (TaskState.PREPARING, TaskState.FAILED),
        (TaskState.RUNNING, TaskState.SUCCEEDED),
        (TaskState.RUNNING, TaskState.FAILED),
        *((s, TaskState.CANCELED) for s in (TaskState.QUEUED, *ACTIVE_STATES)),
        *((s, TaskState.QUEUED) for s in ACTIVE_STATES),
        *((s, TaskState.FAILED) for s in ACTIVE_STATES),
    }
)


def is_legal(state: TaskState, event: LifecycleEvent) -> bool:
    if (state, type(event)) not in ALLOWED_EDGES:
        return False
    if isinstance(event, Fail):
        return event.phase is FailurePhase.PREPARE
    return True


def transition(
    task: TaskRecord, event: LifecycleEvent, now: float, max_retries: int = DEFAULT_MAX_RETRIES
) -> TaskRecord:
    if not is_legal(task.state, event):
        raise errors.IllegalTransition(
            f"task {task.task_id}: {_EVENT_NAMES[type(event)]} not allowed in state {task.state.value}"
        )
    if isinstance(event, Assign):
        return replace(task, state=TaskState.ASSIGNED, executor_id=event.executor_id)
    if isinstance(event, BeginPrepare):
        return replace(task, state=TaskState.PREPARING)
    if isinstance(event, BeginRun):
        start = task.start_time if task.start_time is not None else now
        return replace(task, state=TaskState.RUNNING, start_time=start)
    if isinstance(event, Finish):
        if event.exit_code == 0:
            return replace(task, state=TaskState.SUCCEEDED, exit_code=0, end_time=now)
        return replace(
            task, state=TaskState.FAILED, exit_code=event.exit_code, failure_phase=FailurePhase.RUN, end_time=now
        )
    if isinstance(event, Fail):
        return replace(task, state=TaskState.FAILED, failure_phase=event.phase, end_time=now)
    if isinstance(event, Cancel):
        return replace(task, state=TaskState.CANCELED, end_time=now)
    # ExecutorLost
    used = task.retries_used + 1
    if used <= max_retries:
        return replace(task, state=TaskState.QUEUED, executor_id=None, retries_used=used)
    return replace(
        task, state=TaskState.FAILED, retries_used=used, failure_phase=FailurePhase.EXECUTOR_LOST, end_time=now
    )


def check_record(task: TaskRecord) -> None:
    """Raise AssertionError if a record breaks a structural invariant."""
    has_code = task.exit_code is not None
    wants_code = task.state is TaskState.SUCCEEDED or (
        task.state is TaskState.FAILED and task.failure_phase is FailurePhase.RUN
    )
    assert has_code == wants_code, f"exit_code presence wrong for {task.state} / {task.failure_phase}"
    if task.state is TaskState.SUCCEEDED:
        assert task.exit_code == 0
    if task.state in ACTIVE_STATES:
        assert task.executor_id is not None
    if task.state is TaskState.QUEUED:
        assert task.executor_id is None
