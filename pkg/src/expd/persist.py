"""Coordinator durable state.

``state/events.log`` holds one canonical JSON object per line; each line
carries the full task record produced by one submit or lifecycle event, so
replay is an upsert guarded by the lifecycle graph. ``state/tasks/<id>.json``
is a materialized view rewritten after every append. Task output lives in
``state/logs/<id>.jsonl``.
"""

from __future__ import annotations

import base64
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from expd import canonical, errors
from expd.model import (
    ACTIVE_STATES,
    DEFAULT_MAX_RETRIES,
    ExecutorLost,
    LifecycleEvent,
    TaskRecord,
    TaskState,
    STATE_GRAPH,
    event_from_dict,
    event_to_dict,
    is_legal,
    transition,
)
from expd.objstore import atomic_write

log = logging.getLogger(__name__)

STREAMS = ("STDOUT", "STDERR")
MAX_CHUNK = 64 * 1024


@dataclass
class RecoveredState:
    tasks: dict[str, TaskRecord] = field(default_factory=dict)
    last_seq: int = 0
    valid_bytes: int = 0


def apply_line(state: RecoveredState, entry: dict[str, Any]) -> None:
    """Apply one log entry; entries at or below ``last_seq`` are skipped."""
    seq = entry["seq"]
    if seq <= state.last_seq:
        return
    if entry.get("kind") != "task":
        raise errors.CorruptState(f"unknown event kind {entry.get('kind')!r}")
    record = TaskRecord.from_dict(entry["record"])
    prev = state.tasks.get(record.task_id)
    event = event_from_dict(entry["event"]) if entry.get("event") else None
    if prev is None:
        if event is not None or record.state is not TaskState.QUEUED:
            raise errors.CorruptState(f"task {record.task_id} first appears in state {record.state.value}")
    else:
        if event is None or not is_legal(prev.state, event) or (prev.state, record.state) not in STATE_GRAPH:
            raise errors.CorruptState(
                f"task {record.task_id}: illegal edge {prev.state.value} -> {record.state.value}"
            )
    state.tasks[record.task_id] = record
    state.last_seq = seq


def replay(data: bytes, state: Optional[RecoveredState] = None) -> RecoveredState:
    """Replay log bytes into ``state``. A trailing partial line is ignored."""
    state = state or RecoveredState()
    offset = 0
    valid = 0
    while offset < len(data):
        nl = data.find(b"\n", offset)
        if nl < 0:
            log.warning("ignoring torn trailing record at byte %d", offset)
            break
        line = data[offset:nl]
        if line.strip():
            try:
                entry = canonical.loads(line)
                if not isinstance(entry, dict) or "seq" not in entry:
                    raise ValueError("not an event object")
            except ValueError as exc:
                raise errors.CorruptState(f"unparseable event at byte offset {offset}: {exc}") from None
            try:
                apply_line(state, entry)
            except (KeyError, TypeError, ValueError) as exc:
                raise errors.CorruptState(f"malformed event at byte offset {offset}: {exc}") from None
        offset = nl + 1
        valid = offset
    state.valid_bytes = valid
    return state


class EventLog:
    """Single-writer append-only log; every append is flushed and fsynced."""

    def __init__(self, state_dir: str | os.PathLike, fsync: bool = True) -> None:
        self.state_dir = Path(state_dir)
        self.path = self.state_dir / "events.log"
        self.tasks_dir = self.state_dir / "tasks"
        self.fsync = fsync
        self._lock = threading.Lock()
        self._fh = None
        self._seq = 0

    def open(self, last_seq: int, valid_bytes: int) -> None:
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.tasks_dir.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")
        if self._fh.tell() > valid_bytes:
            # drop a torn tail so new appends start on a clean line
            self._fh.truncate(valid_bytes)
            self._fh.seek(valid_bytes)
        self._seq = last_seq

    def append(self, record: TaskRecord, event: Optional[LifecycleEvent]) -> int:
        assert self._fh is not None, "event log not opened"
        with self._lock:
            self._seq += 1
            entry = {
                "seq": self._seq,
                "kind": "task",
                "time": time.time(),
                "event": event_to_dict(event) if event is not None else None,
                "record": record.to_dict(),
            }
            self._fh.write(canonical.dumpb(entry) + b"\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            atomic_write(self.tasks_dir / f"{record.task_id}.json", canonical.dumpb(record.to_dict()))
            return self._seq

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def read_log(state_dir: str | os.PathLike) -> bytes:
    path = Path(state_dir) / "events.log"
    try:
        return path.read_bytes()
    except FileNotFoundError:
        return b""


def recover(
    state_dir: str | os.PathLike, max_retries: int = DEFAULT_MAX_RETRIES, fsync: bool = True
) -> tuple[RecoveredState, EventLog]:
    """Rebuild task records and reopen the log for appending.

    Tasks that were assigned, preparing or running lose their executor with
    the restart and go through ExecutorLost; those transitions are logged.
    """
    state = replay(read_log(state_dir))
    elog = EventLog(state_dir, fsync=fsync)
    elog.open(state.last_seq, state.valid_bytes)
    now = time.time()
    for tid in sorted(state.tasks):
        rec = state.tasks[tid]
        if rec.state in ACTIVE_STATES:
            new = transition(rec, ExecutorLost(), now, max_retries)
            state.last_seq = elog.append(new, ExecutorLost())
            state.tasks[tid] = new
    for tid, rec in state.tasks.items():
        path = elog.tasks_dir / f"{tid}.json"
        atomic_write(path, canonical.dumpb(rec.to_dict()))
    return state, elog


@dataclass(frozen=True)
class LogChunk:
    task_id: str
    stream: str
    seq: int
    data: bytes

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "stream": self.stream,
            "seq": self.seq,
            "data": base64.b64encode(self.data).decode("ascii"),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogChunk":
        return cls(d["task_id"], d["stream"], int(d["seq"]), base64.b64decode(d["data"]))


class LogBook:
    """Per-task log chunks in arrival order, persisted as JSON lines."""

    def __init__(self, state_dir: Optional[str | os.PathLike] = None) -> None:
        self.dir = Path(state_dir) / "logs" if state_dir is not None else None
        self._chunks: dict[str, list[LogChunk]] = {}
        self._next: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            for path in sorted(self.dir.glob("*.jsonl")):
                self._load(path)

    def _load(self, path: Path) -> None:
        data = path.read_bytes()
        valid = 0
        for line in data.splitlines(keepends=True):
            if not line.endswith(b"\n"):
                break
            try:
                chunk = LogChunk.from_dict(canonical.loads(line))
            except (ValueError, KeyError):
                break
            self._accept(chunk)
            valid += len(line)
        if valid < len(data):
            # drop a torn tail so later appends stay readable
            with open(path, "r+b") as fh:
                fh.truncate(valid)

    def _accept(self, chunk: LogChunk) -> bool:
        key = (chunk.task_id, chunk.stream)
        expected = self._next.get(key, 0)
        if chunk.seq != expected:
            return False
        self._next[key] = expected + 1
        self._chunks.setdefault(chunk.task_id, []).append(chunk)
        return True

    def append(self, chunk: LogChunk) -> bool:
        """Store ``chunk``; duplicates and out-of-order chunks are rejected."""
        if chunk.stream not in STREAMS:
            raise errors.ValidationError(f"unknown stream {chunk.stream!r}")
        with self._lock:
            if not self._accept(chunk):
                return False
            if self.dir is not None:
                with open(self.dir / f"{chunk.task_id}.jsonl", "ab") as fh:
                    fh.write(canonical.dumpb(chunk.to_dict()) + b"\n")
            return True

    def since(self, task_id: str, cursor: dict[str, int]) -> list[LogChunk]:
        with self._lock:
            return [c for c in self._chunks.get(task_id, []) if c.seq >= cursor.get(c.stream, 0)]

    def next_seq(self, task_id: str, stream: str) -> int:
        with self._lock:
            return self._next.get((task_id, stream), 0)
