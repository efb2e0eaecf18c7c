"""Coordinator: scheduler, relay, stores and durable state behind one TCP listener.

Every state mutation runs under ``Coordinator.lock``, which plays the role of
the single command queue: calls from any connection thread are applied one
at a time, in arrival order. Pushes to peers go through per-connection
outboxes so nothing blocks while the lock is held.
"""

from __future__ import annotations

import logging
import os
import queue
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from expd import canonical, errors
from expd.model import (
    HardwareOffer,
    LifecycleEvent,
    RunConfig,
    TaskRecord,
    TaskState,
)
from expd.objstore import ObjectStore
from expd.persist import STREAMS, EventLog, LogBook, LogChunk, recover
from expd.relay import ChannelKind, ChannelRelay, Side
from expd.scheduler import Scheduler, SchedulerConfig
from expd.snapshot import SnapshotStore
from expd.wire import PROTOCOL_VERSION, RAW_TYPES, Connection, MsgType, encode_frame

log = logging.getLogger(__name__)

DEFAULT_PORT = 7077
DEFAULT_STATE_DIR = "./.jt/state"


def default_state_dir() -> str:
    return os.environ.get("EXPD_STATE_DIR", DEFAULT_STATE_DIR)


class Outbox:
    """Queue of encoded frames drained by a writer thread."""

    def __init__(self, conn: Connection) -> None:
        self.conn = conn
        self._q: "queue.Queue[Optional[bytes]]" = queue.Queue()
        self._thread = threading.Thread(target=self._run, daemon=True, name="expd-outbox")
        self._thread.start()
        self.dead = False

    def put(self, frame: bytes) -> None:
        if not self.dead:
            self._q.put(frame)

    def put_json(self, msg_type: int, obj: Any) -> None:
        self.put(encode_frame(msg_type, canonical.dumpb(obj)))

    def event(self, obj: dict) -> None:
        self.put_json(MsgType.EVENT, obj)

    def _run(self) -> None:
        while True:
            frame = self._q.get()
            if frame is None:
                break
            try:
                with self.conn._send_lock:
                    self.conn.sock.sendall(frame)
            except OSError:
                self.dead = True
                self.conn.close()
                break

    def close(self, flush_timeout: float = 2.0) -> None:
        self._q.put(None)
        self._thread.join(timeout=flush_timeout)


class ConnSink:
    """Relay sink that writes into a connection outbox.

    Deliveries are held back until :meth:`release` so the attach reply goes
    out before any replayed frame.
    """

    def __init__(self, outbox: Outbox, data_type: int) -> None:
        self.outbox = outbox
        self.data_type = data_type
        self._lock = threading.Lock()
        self._held: Optional[list[bytes]] = []

    def _put(self, frame: bytes) -> None:
        with self._lock:
            if self._held is not None:
                self._held.append(frame)
            else:
                self.outbox.put(frame)

    def deliver(self, seq: int, payload: bytes) -> None:
        self._put(encode_frame(self.data_type, payload))

    def notify(self, status: str, reason: str = "") -> None:
        self._put(encode_frame(MsgType.EVENT, canonical.dumpb(
            {"event": "channel_status", "status": status, "reason": reason})))

    def release(self) -> None:
        with self._lock:
            held, self._held = self._held or [], None
            for frame in held:
                self.outbox.put(frame)


@dataclass
class LogSubscription:
    outbox: Outbox
    rid: int


class Coordinator:
    def __init__(
        self,
        state_dir: str | os.PathLike,
        config: Optional[SchedulerConfig] = None,
        store_root: Optional[str | os.PathLike] = None,
        fsync: bool = True,
        clock: Callable[[], float] = time.time,
        relay: Optional[ChannelRelay] = None,
    ) -> None:
        self.state_dir = Path(state_dir).resolve()
        self.config = config or SchedulerConfig()
        self.store_root = Path(store_root).resolve() if store_root else self.state_dir / "store"
        self.objects = ObjectStore(self.store_root)
        self.snapshots = SnapshotStore(self.objects)
        self.relay = relay or ChannelRelay()
        self.lock = threading.RLock()
        self._changed: list[TaskRecord] = []
        self.scheduler = Scheduler(
            config=self.config,
            clock=clock,
            snapshot_exists=self.snapshots.has_snapshot,
            on_change=self._on_change,
            on_kill=self._on_kill,
        )
        recovered, self.eventlog = recover(self.state_dir, self.config.max_retries, fsync=fsync)
        self.scheduler.restore(recovered.tasks)
        self.logs = LogBook(self.state_dir)
        self.agents: dict[str, Outbox] = {}
        self.subscribers: dict[str, list[LogSubscription]] = {}
        # task ids whose scratch workspace an agent still holds
        self.retained: dict[str, str] = {}

    # -- hooks ---------------------------------------------------------

    def _on_change(self, record: TaskRecord, event: Optional[LifecycleEvent]) -> None:
        # write-ahead: the event is durable before the caller sees its effect
        self.eventlog.append(record, event)
        self._changed.append(record)

    def _on_kill(self, executor_id: str, task_id: str) -> None:
        box = self.agents.get(executor_id)
        if box is not None:
            box.event({"event": "kill", "task_id": task_id})

    def _drain(self) -> None:
        changed, self._changed = self._changed, []
        for record in changed:
            if record.terminal:
                self.relay.close_task_channels(record.task_id, "TASK_TERMINAL")
                for sub in self.subscribers.pop(record.task_id, []):
                    sub.outbox.event(self._log_end(record))
            elif record.state is TaskState.RUNNING:
                self.relay.broadcast(record.task_id, "task_running")

    @staticmethod
    def _log_end(record: TaskRecord) -> dict:
        return {
            "event": "log_end",
            "task_id": record.task_id,
            "state": record.state.value,
            "exit_code": record.exit_code,
        }

    def _mutate(self, fn: Callable[[], Any]) -> Any:
        with self.lock:
            try:
                return fn()
            finally:
                self._drain()

    # -- client operations ---------------------------------------------

    def submit(self, run_config: dict, origin_zone: str = "local", workspace: str = "") -> str:
        cfg = RunConfig.from_dict(run_config)

        def op() -> str:
            tid = self.scheduler.submit_task(cfg, origin_zone=origin_zone, workspace=workspace)
            self.scheduler.match_tasks()
            return tid

        return self._mutate(op)

    def reproduce(self, task_id: str) -> str:
        with self.lock:
            old = self.scheduler.get_task(task_id)
        return self.submit(old.run_config.to_dict(), old.origin_zone, old.workspace)

    def cancel(self, task_id: str) -> TaskRecord:
        return self._mutate(lambda: self.scheduler.cancel_task(task_id))

    def status(self, task_id: Optional[str] = None) -> list[TaskRecord]:
        with self.lock:
            if task_id is not None:
                return [self.scheduler.get_task(task_id)]
            return sorted(self.scheduler.tasks.values(), key=lambda t: (t.submit_time, t.task_id))

    def executors(self) -> list[dict]:
        with self.lock:
            return self.scheduler.executor_snapshot()

    def tick(self) -> None:
        self._mutate(self.scheduler.tick)

    # -- agent operations ----------------------------------------------

    def register(self, offer: HardwareOffer, outbox: Optional[Outbox] = None) -> str:
        def op() -> str:
            eid = self.scheduler.register_executor(offer)
            if outbox is not None:
                self.agents[eid] = outbox
            self.scheduler.match_tasks()
            return eid

        return self._mutate(op)

    def heartbeat(self, executor_id: str) -> None:
        with self.lock:
            self.scheduler.heartbeat(executor_id)

    def executor_gone(self, executor_id: str, outbox: Optional[Outbox] = None) -> None:
        def op() -> None:
            if outbox is not None and self.agents.get(executor_id) is not outbox:
                return
            self.agents.pop(executor_id, None)
            for tid in [t for t, e in self.retained.items() if e == executor_id]:
                del self.retained[tid]
            self.scheduler.disconnect_executor(executor_id)
            self.scheduler.match_tasks()

        self._mutate(op)

    def claim(self, executor_id: str) -> Optional[dict]:
        def op() -> Optional[dict]:
            record = self.scheduler.claim(executor_id)
            if record is None:
                return None
            zone = self.scheduler.get_executor(executor_id).offer.zone
            try:
                self._stage_inputs(record, zone)
            except errors.ExpdError as exc:
                log.warning("task %s: staging inputs into %s failed: %s", record.task_id, zone, exc)
                self._append_log_line(record.task_id, f"expd: staging inputs failed: {exc}\n")
                self.scheduler.fail_prepare(record.task_id, executor_id)
                return None
            self.retained[record.task_id] = executor_id
            return {"task": record.to_dict(), "zone": zone}

        return self._mutate(op)

    def _stage_inputs(self, record: TaskRecord, zone: str) -> None:
        """Replicate the snapshot and mounted objects into the executor's zone."""
        src = record.origin_zone
        cfg = record.run_config
        self.snapshots.replicate_snapshot(cfg.workdir_snapshot, src, zone)
        for m in cfg.mounts:
            keys = self.objects.list_prefix(src, m.bucket, m.prefix)
            self.objects.replicate(src, zone, m.bucket, keys)

    def _append_log_line(self, task_id: str, text: str) -> None:
        chunk = LogChunk(task_id, "STDERR", self.logs.next_seq(task_id, "STDERR"), text.encode())
        self._publish(chunk)

    def report(self, executor_id: str, task_id: str, event: str, exit_code: Optional[int] = None) -> dict:
        def op() -> dict:
            if event == "begin_run":
                rec = self.scheduler.begin_run(task_id, executor_id)
                channels = [
                    {"channel_id": c.channel_id, "kind": c.kind.value} for c in self.relay.channels_for_task(task_id)
                ]
                return {"task": rec.to_dict(), "channels": channels}
            if event == "fail_prepare":
                rec = self.scheduler.fail_prepare(task_id, executor_id)
            elif event == "finish":
                if exit_code is None:
                    raise errors.ValidationError("finish requires exit_code")
                rec = self.scheduler.record_result(task_id, executor_id, int(exit_code))
            else:
                raise errors.ValidationError(f"unknown report event {event!r}")
            self.scheduler.match_tasks()
            return {"task": rec.to_dict()}

        return self._mutate(op)

    def log_append(self, chunk: LogChunk) -> None:
        with self.lock:
            self.scheduler.get_task(chunk.task_id)
            self._publish(chunk)

    def _publish(self, chunk: LogChunk) -> None:
        if self.logs.append(chunk):
            event = {"event": "log", **chunk.to_dict()}
            for sub in self.subscribers.get(chunk.task_id, []):
                sub.outbox.event(event)

    def log_subscribe(self, task_id: str, cursor: dict[str, int], follow: bool, outbox: Outbox, rid: int) -> None:
        with self.lock:
            record = self.scheduler.get_task(task_id)
            outbox.put_json(MsgType.REPLY, {"rid": rid, "state": record.state.value})
            for chunk in self.logs.since(task_id, cursor):
                outbox.event({"event": "log", **chunk.to_dict()})
            if record.terminal or not follow:
                outbox.event(self._log_end(record))
            else:
                self.subscribers.setdefault(task_id, []).append(LogSubscription(outbox, rid))

    def unsubscribe(self, outbox: Outbox) -> None:
        with self.lock:
            for tid in list(self.subscribers):
                self.subscribers[tid] = [s for s in self.subscribers[tid] if s.outbox is not outbox]
                if not self.subscribers[tid]:
                    del self.subscribers[tid]

    # -- channels ------------------------------------------------------

    def channel_open(self, task_id: str, kind: str, reuse: bool = False) -> str:
        kind = ChannelKind(kind)
        with self.lock:
            record = self.scheduler.get_task(task_id)
            if record.terminal:
                retained = kind is ChannelKind.TERMINAL and self.retained.get(task_id) in self.agents
                if not retained:
                    raise errors.TaskTerminal(f"task {task_id} is {record.state.value}")
            existing = self.relay.find(task_id, kind) if reuse else None
            cid = self.relay.open_channel(task_id, kind, reuse=reuse)
            if existing is not None and existing.channel_id == cid:
                return cid
            owner = record.executor_id if not record.terminal else self.retained.get(task_id)
            running_or_done = record.state is TaskState.RUNNING or record.terminal
            if owner and running_or_done and owner in self.agents:
                self.agents[owner].event(
                    {"event": "channel_open", "task_id": task_id, "channel_id": cid, "kind": kind.value}
                )
            return cid

    def channel_close(self, channel_id: str, reason: str = "CLOSED") -> None:
        self.relay.close_channel(channel_id, reason)

    def check_task_side(self, channel_id: str, executor_id: Optional[str]) -> None:
        with self.lock:
            ch = self.relay.get(channel_id)
            record = self.scheduler.get_task(ch.task_id)
            owner = record.executor_id if not record.terminal else self.retained.get(ch.task_id)
            if executor_id is None or owner != executor_id:
                raise errors.WrongExecutor(f"executor {executor_id} does not own task {ch.task_id}")

    # -- garbage collection --------------------------------------------

    def gc(self, keep_last: int) -> dict:
        with self.lock:
            roots: set[str] = set()
            by_workspace: dict[str, list[TaskRecord]] = {}
            for t in self.scheduler.tasks.values():
                if not t.terminal:
                    roots.add(t.run_config.workdir_snapshot)
                by_workspace.setdefault(t.workspace, []).append(t)
            for tasks in by_workspace.values():
                tasks.sort(key=lambda t: (t.submit_time, t.task_id), reverse=True)
                roots.update(t.run_config.workdir_snapshot for t in tasks[:keep_last])
            reports = [self.snapshots.collect_garbage(z, sorted(roots)).to_dict() for z in self.objects.zones()]
            released: dict[str, list[str]] = {}
            for tid, eid in list(self.retained.items()):
                if self.scheduler.tasks[tid].terminal:
                    released.setdefault(eid, []).append(tid)
                    del self.retained[tid]
            for eid, tids in released.items():
                if eid in self.agents:
                    self.agents[eid].event({"event": "release_workspaces", "task_ids": sorted(tids)})
            return {"zones": reports, "live_roots": sorted(roots), "released_workspaces": sum(map(len, released.values()))}

    def workspace_released(self, executor_id: str, task_ids: list[str]) -> None:
        with self.lock:
            for tid in task_ids:
                if self.retained.get(tid) == executor_id:
                    del self.retained[tid]

    def close(self) -> None:
        self.eventlog.close()


# -- network server -----------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    server: "DaemonServer"

    def setup(self) -> None:
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.conn = Connection(self.request)
        self.outbox = Outbox(self.conn)
        self.role = ""
        self.executor_id: Optional[str] = None
        self.registered: Optional[str] = None
        self.channel: Optional[tuple[str, Side, int]] = None

    def handle(self) -> None:
        coord = self.server.coordinator
        try:
            while True:
                frame = self.conn.recv()
                if frame is None:
                    break
                msg_type, body = frame
                if msg_type in RAW_TYPES:
                    self._channel_data(msg_type, body)
                    continue
                try:
                    msg = canonical.loads(body)
                    if not isinstance(msg, dict):
                        raise ValueError("control body must be a JSON object")
                except ValueError as exc:
                    raise errors.ProtocolError(f"bad control body: {exc}") from None
                rid = msg.get("rid")
                try:
                    result = self._dispatch(coord, msg_type, msg)
                except errors.ExpdError as exc:
                    if rid is not None:
                        self.outbox.put_json(
                            MsgType.ERROR, {"rid": rid, "error": type(exc).__name__, "message": str(exc)}
                        )
                    elif self.channel is not None:
                        self.outbox.event({"event": "channel_status", "status": "error",
                                           "reason": f"{type(exc).__name__}: {exc}"})
                    continue
                sink = result.pop("_release", None) if isinstance(result, dict) else None
                if result is not None and rid is not None:
                    result["rid"] = rid
                    self.outbox.put_json(MsgType.REPLY, result)
                if sink is not None:
                    sink.release()
        except errors.ExpdError as exc:
            log.info("closing connection: %s", exc)

    def finish(self) -> None:
        coord = self.server.coordinator
        if self.channel is not None:
            cid, side, token = self.channel
            coord.relay.detach(cid, side, token)
        coord.unsubscribe(self.outbox)
        if self.registered is not None:
            coord.executor_gone(self.registered, self.outbox)
        self.outbox.close()
        self.conn.close()

    def _channel_data(self, msg_type: int, body: bytes) -> None:
        coord = self.server.coordinator
        if self.channel is None:
            raise errors.ProtocolError("channel data on an unbound connection")
        cid, side, token = self.channel
        expected = MsgType.CHANNEL_DATA_C2T if side is Side.CLIENT else MsgType.CHANNEL_DATA_T2C
        if msg_type != expected:
            raise errors.ProtocolError("channel data in the wrong direction")
        try:
            coord.relay.send(cid, side, body, token=token)
        except errors.BufferOverflow:
            raise errors.ProtocolError(f"channel {cid} overflowed") from None
        except errors.ExpdError as exc:
            self.outbox.event({"event": "channel_status", "status": "error",
                               "reason": f"{type(exc).__name__}: {exc}"})

    def _dispatch(self, coord: Coordinator, msg_type: int, msg: dict) -> Optional[dict]:
        if msg_type == MsgType.HELLO:
            if msg.get("version") != PROTOCOL_VERSION:
                raise errors.ProtocolError(f"unsupported protocol version {msg.get('version')}")
            self.role = msg.get("role", "cli")
            self.executor_id = msg.get("executor_id")
            cfg = coord.config
            return {
                "version": PROTOCOL_VERSION,
                "store_root": str(coord.store_root),
                "heartbeat_seconds": cfg.heartbeat_seconds,
                "lease_seconds": cfg.lease_seconds,
            }
        if msg_type == MsgType.SUBMIT:
            tid = coord.submit(msg["run_config"], msg.get("origin_zone", "local"), msg.get("workspace", ""))
            return {"task_id": tid}
        if msg_type == MsgType.STATUS:
            if msg.get("executors"):
                return {"executors": coord.executors()}
            return {"tasks": [t.to_dict() for t in coord.status(msg.get("task_id"))]}
        if msg_type == MsgType.CANCEL:
            return {"task": coord.cancel(msg["task_id"]).to_dict()}
        if msg_type == MsgType.REPRODUCE:
            old = coord.status(msg["task_id"])[0]
            if not coord.snapshots.has_snapshot(old.origin_zone, old.run_config.workdir_snapshot):
                raise errors.SnapshotNotFound(f"snapshot {old.run_config.workdir_snapshot} was collected")
            return {"task_id": coord.reproduce(msg["task_id"])}
        if msg_type == MsgType.GC:
            return coord.gc(int(msg.get("keep_last", 1)))
        if msg_type == MsgType.REGISTER:
            offer = HardwareOffer.from_dict(msg["offer"])
            if self.executor_id and offer.executor_id != self.executor_id:
                raise errors.ValidationError("offer executor_id differs from hello")
            self.registered = coord.register(offer, self.outbox)
            self.executor_id = self.registered
            return {"executor_id": self.registered}
        if msg_type == MsgType.HEARTBEAT:
            coord.heartbeat(self._agent_id())
            return {} if msg.get("rid") is not None else None
        if msg_type == MsgType.CLAIM:
            return {"assignment": coord.claim(self._agent_id())}
        if msg_type == MsgType.REPORT:
            return coord.report(self._agent_id(), msg["task_id"], msg["event"], msg.get("exit_code"))
        if msg_type == MsgType.LOG_APPEND:
            coord.log_append(LogChunk.from_dict(msg))
            return {} if msg.get("rid") is not None else None
        if msg_type == MsgType.LOG_SUBSCRIBE:
            cursor = {s: int(msg.get("from", {}).get(s, 0)) for s in STREAMS}
            coord.log_subscribe(msg["task_id"], cursor, bool(msg.get("follow")), self.outbox, msg.get("rid"))
            return None
        if msg_type == MsgType.CHANNEL_OPEN:
            return {"channel_id": coord.channel_open(msg["task_id"], msg["kind"], bool(msg.get("reuse")))}
        if msg_type == MsgType.CHANNEL_ATTACH:
            return self._attach(coord, msg)
        if msg_type == MsgType.CHANNEL_ACK:
            if self.channel is None:
                raise errors.NotAttached("ack on an unbound connection")
            cid, side, token = self.channel
            coord.relay.ack(cid, side, int(msg["seq"]), token=token)
            return {} if msg.get("rid") is not None else None
        if msg_type == MsgType.CHANNEL_CLOSE:
            cid = msg.get("channel_id") or (self.channel[0] if self.channel else None)
            if cid is None:
                raise errors.UnknownChannel("no channel given")
            coord.channel_close(cid, msg.get("reason", "CLOSED"))
            return {}
        if msg_type == MsgType.WORKSPACE_RELEASED:
            coord.workspace_released(self._agent_id(), list(msg.get("task_ids", [])))
            return {} if msg.get("rid") is not None else None
        raise errors.ProtocolError(f"unexpected message type 0x{msg_type:02x}")

    def _agent_id(self) -> str:
        if not self.executor_id:
            raise errors.UnknownExecutor("connection has not identified an executor")
        return self.executor_id

    def _attach(self, coord: Coordinator, msg: dict) -> dict:
        if self.channel is not None:
            raise errors.AlreadyAttached("connection is already bound to a channel")
        cid = msg["channel_id"]
        side = Side(msg["side"])
        if side is Side.TASK:
            coord.check_task_side(cid, self.executor_id)
        data_type = MsgType.CHANNEL_DATA_T2C if side is Side.CLIENT else MsgType.CHANNEL_DATA_C2T
        sink = ConnSink(self.outbox, data_type)
        token, sent_high = coord.relay.attach(cid, side, int(msg.get("resume_from", 0)), sink)
        self.channel = (cid, side, token)
        ch = coord.relay.get(cid)
        return {
            "sent_high": sent_high,
            "kind": ch.kind.value,
            "task_id": ch.task_id,
            "peer_attached": ch.attached[side.other] is not None,
            "_release": sink,
        }


class DaemonServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, coordinator: Coordinator, host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> None:
        self.coordinator = coordinator
        try:
            super().__init__((host, port), _Handler)
        except OSError as exc:
            raise errors.PortInUse(f"cannot bind {host}:{port}: {exc}") from exc
        self._stop = threading.Event()
        self._ticker = threading.Thread(target=self._tick_loop, daemon=True, name="expd-ticker")

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def _tick_loop(self) -> None:
        while not self._stop.wait(self.coordinator.config.tick_seconds):
            try:
                self.coordinator.tick()
            except Exception:
                log.exception("scheduler tick failed")

    def start(self) -> threading.Thread:
        self._ticker.start()
        t = threading.Thread(target=self.serve_forever, daemon=True, name="expd-server")
        t.start()
        return t

    def stop(self) -> None:
        self._stop.set()
        self.shutdown()
        self.server_close()
        self.coordinator.close()
