"""Task queue, executor registry with heartbeat leases, and best-fit matching.

The scheduler holds no locks of its own; the coordinator serializes every
call. Durability is delegated to ``on_change``, which is invoked with each new
task record *before* the mutating call returns.
"""

from __future__ import annotations

import logging
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable, Optional

from expd import errors
from expd.model import (
    ACTIVE_STATES,
    Assign,
    BeginPrepare,
    BeginRun,
    Cancel,
    ExecutorLost,
    Fail,
    FailurePhase,
    Finish,
    HardwareOffer,
    LifecycleEvent,
    RunConfig,
    TaskRecord,
    TaskState,
    satisfies,
    transition,
    validate_run_config,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SchedulerConfig:
    lease_seconds: float = 15.0
    heartbeat_seconds: float = 5.0
    max_retries: int = 2
    tick_seconds: float = 1.0

    def __post_init__(self) -> None:
        if not self.heartbeat_seconds < self.lease_seconds:
            raise errors.ValidationError("heartbeat_seconds must be smaller than lease_seconds")
        if self.max_retries < 0:
            raise errors.ValidationError("max_retries must be non-negative")
        if self.tick_seconds <= 0:
            raise errors.ValidationError("tick_seconds must be positive")


@dataclass
class ExecutorRecord:
    executor_id: str
    offer: HardwareOffer
    last_heartbeat: float
    busy_with: Optional[str] = None
    connected: bool = True

    @property
    def idle(self) -> bool:
        return self.connected and self.busy_with is None

    def to_dict(self) -> dict:
        return {
            "executor_id": self.executor_id,
            "offer": self.offer.to_dict(),
            "last_heartbeat": self.last_heartbeat,
            "busy_with": self.busy_with,
            "connected": self.connected,
        }


@dataclass(frozen=True)
class Assignment:
    task_id: str
    executor_id: str


ChangeHook = Callable[[TaskRecord, Optional[LifecycleEvent]], None]


def new_task_id() -> str:
    return uuid.uuid4().hex[:16]


def _fit_key(offer: HardwareOffer, task: TaskRecord) -> tuple:
    spec = task.run_config.hardware
    return (offer.accel_count - spec.accel_count, offer.memory_mb - spec.memory_mb, offer.executor_id)


@dataclass
class Scheduler:
    config: SchedulerConfig = field(default_factory=SchedulerConfig)
    clock: Callable[[], float] = time.time
    snapshot_exists: Callable[[str, str], bool] = lambda zone, sid: True
    on_change: Optional[ChangeHook] = None
    on_kill: Optional[Callable[[str, str], None]] = None

    def __post_init__(self) -> None:
        self.tasks: dict[str, TaskRecord] = {}
        self.executors: dict[str, ExecutorRecord] = {}
        # assignments bound to an executor but not yet claimed
        self.pending: dict[str, str] = {}

    # -- helpers -------------------------------------------------------

    def _apply(self, task_id: str, event: LifecycleEvent) -> TaskRecord:
        old = self.tasks[task_id]
        new = transition(old, event, self.clock(), self.config.max_retries)
        if self.on_change is not None:
            self.on_change(new, event)
        self.tasks[task_id] = new
        if old.executor_id and (new.terminal or new.state is TaskState.QUEUED):
            ex = self.executors.get(old.executor_id)
            if ex is not None and ex.busy_with == task_id:
                ex.busy_with = None
            if self.pending.get(old.executor_id) == task_id:
                del self.pending[old.executor_id]
        return new

    def get_task(self, task_id: str) -> TaskRecord:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise errors.UnknownTask(f"unknown task {task_id}") from None

    def get_executor(self, executor_id: str) -> ExecutorRecord:
        try:
            return self.executors[executor_id]
        except KeyError:
            raise errors.UnknownExecutor(f"unknown executor {executor_id}") from None

    def queued(self) -> list[TaskRecord]:
        q = [t for t in self.tasks.values() if t.state is TaskState.QUEUED]
        q.sort(key=lambda t: (t.submit_time, t.task_id))
        return q

    def restore(self, records: dict[str, TaskRecord]) -> None:
        """Load recovered records; no executors survive a restart."""
        self.tasks = dict(records)
        self.executors.clear()
        self.pending.clear()

    # -- operations ----------------------------------------------------

    def submit_task(
        self, cfg: RunConfig, origin_zone: str = "local", workspace: str = "", task_id: Optional[str] = None
    ) -> str:
        validate_run_config(cfg)
        if not self.snapshot_exists(origin_zone, cfg.workdir_snapshot):
            raise errors.SnapshotNotFound(f"snapshot {cfg.workdir_snapshot} not found in zone {origin_zone}")
        tid = task_id or new_task_id()
        while tid in self.tasks:
            tid = new_task_id()
        record = TaskRecord(tid, cfg, submit_time=self.clock(), origin_zone=origin_zone, workspace=workspace)
        if self.on_change is not None:
            self.on_change(record, None)
        self.tasks[tid] = record
        return tid

    def register_executor(self, offer: HardwareOffer) -> str:
        offer.validate()
        now = self.clock()
        old = self.executors.get(offer.executor_id)
        if old is not None and old.busy_with is not None:
            # an agent restart loses whatever it was running
            self._apply(old.busy_with, ExecutorLost())
        self.pending.pop(offer.executor_id, None)
        self.executors[offer.executor_id] = ExecutorRecord(offer.executor_id, offer, now)
        return offer.executor_id

    def heartbeat(self, executor_id: str) -> None:
        ex = self.get_executor(executor_id)
        if not ex.connected:
            raise errors.UnknownExecutor(f"executor {executor_id} lost its lease; re-register")
        ex.last_heartbeat = self.clock()

    def disconnect_executor(self, executor_id: str) -> None:
        ex = self.executors.get(executor_id)
        if ex is None or not ex.connected:
            return
        ex.connected = False
        self.pending.pop(executor_id, None)
        if ex.busy_with is not None:
            task = self.tasks.get(ex.busy_with)
            if task is not None and task.state in ACTIVE_STATES and task.executor_id == executor_id:
                self._apply(task.task_id, ExecutorLost())
            ex.busy_with = None

    def check_leases(self) -> list[str]:
        now = self.clock()
        lost = [
            ex.executor_id
            for ex in self.executors.values()
            if ex.connected and now - ex.last_heartbeat > self.config.lease_seconds
        ]
        for eid in lost:
            log.warning("executor %s missed its lease", eid)
            self.disconnect_executor(eid)
        return lost

    def match_tasks(self) -> list[Assignment]:
        idle = {eid: ex for eid, ex in self.executors.items() if ex.idle}
        out: list[Assignment] = []
        for task in self.queued():
            if not idle:
                break
            spec = task.run_config.hardware
            fits = [ex for ex in idle.values() if satisfies(ex.offer, spec)]
            if not fits:
                continue
            best = min(fits, key=lambda ex: _fit_key(ex.offer, task))
            self._apply(task.task_id, Assign(best.executor_id))
            best.busy_with = task.task_id
            self.pending[best.executor_id] = task.task_id
            del idle[best.executor_id]
            out.append(Assignment(task.task_id, best.executor_id))
        return out

    def claim(self, executor_id: str) -> Optional[TaskRecord]:
        """Hand the bound assignment to its executor once; moves it to PREPARING."""
        ex = self.get_executor(executor_id)
        if not ex.connected:
            raise errors.UnknownExecutor(f"executor {executor_id} lost its lease; re-register")
        tid = self.pending.pop(executor_id, None)
        if tid is None:
            return None
        return self._apply(tid, BeginPrepare())

    def _owned(self, task_id: str, executor_id: str) -> TaskRecord:
        task = self.get_task(task_id)
        if task.executor_id != executor_id or task.state not in ACTIVE_STATES:
            if task.terminal:
                raise errors.IllegalTransition(f"task {task_id} is already {task.state.value}")
            raise errors.WrongExecutor(f"task {task_id} is not assigned to {executor_id}")
        return task

    def begin_run(self, task_id: str, executor_id: str) -> TaskRecord:
        self._owned(task_id, executor_id)
        return self._apply(task_id, BeginRun())

    def fail_prepare(self, task_id: str, executor_id: str) -> TaskRecord:
        self._owned(task_id, executor_id)
        return self._apply(task_id, Fail(FailurePhase.PREPARE))

    def record_result(self, task_id: str, executor_id: str, exit_code: int) -> TaskRecord:
        self._owned(task_id, executor_id)
        return self._apply(task_id, Finish(exit_code))

    def cancel_task(self, task_id: str) -> TaskRecord:
        task = self.get_task(task_id)
        if task.terminal:
            raise errors.AlreadyTerminal(f"task {task_id} is already {task.state.value}")
        executor_id = task.executor_id
        record = self._apply(task_id, Cancel())
        if executor_id is not None and self.on_kill is not None:
            self.on_kill(executor_id, task_id)
        return record

    def tick(self) -> list[Assignment]:
        self.check_leases()
        return self.match_tasks()

    def executor_snapshot(self) -> list[dict]:
        return [self.executors[k].to_dict() for k in sorted(self.executors)]
