"""Executor agent: claims tasks, prepares workspaces, runs commands, streams logs.

The agent is single-slot. While a task runs it also hosts the task side of
its channels: DEBUG frames are bridged to a TCP port the task listens on
(``EXPD_DEBUG_PORT``), and each TERMINAL channel gets its own shell rooted
in the workspace.
"""

from __future__ import annotations

import logging
import os
import shutil
import signal
import socket
import stat
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from expd import errors
from expd.client import ChannelEndpoint, RpcClient
from expd.model import HardwareOffer, MountSpec, RunConfig, TaskRecord, check_relative_path
from expd.objstore import ObjectStore
from expd.persist import MAX_CHUNK, LogChunk
from expd.snapshot import SnapshotManifest, SnapshotStore
from expd.wire import MsgType

log = logging.getLogger(__name__)

SPAWN_FAILURE_EXIT = 127

ChunkSink = Callable[[LogChunk], None]


@dataclass
class PreparedWorkspace:
    root: Path
    snapshot_id: str
    mounted: list[tuple[MountSpec, int]] = field(default_factory=list)


class LogPump:
    """Numbers chunks per stream and hands them to a sink in order."""

    def __init__(self, task_id: str, sink: ChunkSink) -> None:
        self.task_id = task_id
        self.sink = sink
        self._seq = {"STDOUT": 0, "STDERR": 0}
        self._lock = threading.Lock()

    def emit(self, stream: str, data: bytes) -> None:
        for start in range(0, len(data), MAX_CHUNK):
            piece = data[start:start + MAX_CHUNK]
            with self._lock:
                chunk = LogChunk(self.task_id, stream, self._seq[stream], piece)
                self._seq[stream] += 1
                self.sink(chunk)


def _pump(fd: int, stream: str, pump: LogPump) -> None:
    while True:
        try:
            data = os.read(fd, MAX_CHUNK)
        except OSError:
            break
        if not data:
            break
        pump.emit(stream, data)
    os.close(fd)


def run_process(
    argv: list[str],
    cwd: Path,
    env: dict[str, str],
    pump: LogPump,
    stop: Optional[threading.Event] = None,
) -> int:
    """Run ``argv`` to completion, streaming both pipes; returns the exit status.

    Signal deaths map to ``128 + signum``. A command that cannot be spawned
    reports 127 and an explanatory line on STDERR.
    """
    out_r, out_w = os.pipe()
    err_r, err_w = os.pipe()
    try:
        proc = subprocess.Popen(
            argv, cwd=cwd, env=env, stdin=subprocess.DEVNULL, stdout=out_w, stderr=err_w, start_new_session=True
        )
    except (FileNotFoundError, PermissionError, NotADirectoryError) as exc:
        for fd in (out_r, out_w, err_r, err_w):
            os.close(fd)
        pump.emit("STDERR", f"expd: cannot spawn {argv[0]!r}: {exc.strerror or exc}\n".encode())
        return SPAWN_FAILURE_EXIT
    os.close(out_w)
    os.close(err_w)
    pumps = [
        threading.Thread(target=_pump, args=(out_r, "STDOUT", pump), daemon=True),
        threading.Thread(target=_pump, args=(err_r, "STDERR", pump), daemon=True),
    ]
    for t in pumps:
        t.start()
    killed_at: Optional[float] = None
    while True:
        try:
            rc = proc.wait(timeout=0.05)
            break
        except subprocess.TimeoutExpired:
            pass
        if stop is not None and stop.is_set():
            if killed_at is None:
                _signal_group(proc.pid, signal.SIGTERM)
                killed_at = time.monotonic()
            elif time.monotonic() - killed_at > 3.0:
                _signal_group(proc.pid, signal.SIGKILL)
    if killed_at is not None:
        # leftover children holding the pipes open would stall the pumps
        _signal_group(proc.pid, signal.SIGKILL)
    for t in pumps:
        t.join()
    return 128 - rc if rc < 0 else rc


def _signal_group(pid: int, sig: int) -> None:
    try:
        os.killpg(pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def task_env(cfg: RunConfig, extra: Optional[dict[str, str]] = None) -> dict[str, str]:
    env = dict(os.environ)
    env.update(extra or {})
    env.update(dict(cfg.env))
    return env


def _collides(target: str, manifest: SnapshotManifest) -> Optional[str]:
    for entry in manifest.entries:
        p = entry.path
        if p == target or p.startswith(target + "/") or target.startswith(p + "/"):
            return p
    return None


def _make_read_only(root: Path) -> None:
    for dirpath, dirnames, filenames in os.walk(root):
        for name in filenames:
            os.chmod(os.path.join(dirpath, name), 0o444)
    for dirpath, dirnames, _ in os.walk(root, topdown=False):
        os.chmod(dirpath, 0o555)


def remove_tree(root: Path) -> None:
    """Delete a workspace, including write-protected mount directories."""
    if not root.exists():
        return
    for dirpath, dirnames, _ in os.walk(root):
        for name in dirnames:
            p = os.path.join(dirpath, name)
            if not os.path.islink(p):
                os.chmod(p, stat.S_IRWXU)
    os.chmod(root, stat.S_IRWXU)
    shutil.rmtree(root)


def prepare_workspace(
    task: TaskRecord,
    scratch_root: Path,
    snapshots: SnapshotStore,
    zone: str,
    pump: Optional[LogPump] = None,
    extra_env: Optional[dict[str, str]] = None,
) -> PreparedWorkspace:
    cfg = task.run_config
    root = Path(scratch_root) / task.task_id
    remove_tree(root)
    manifest = snapshots.materialize(cfg.workdir_snapshot, root, zone)
    ws = PreparedWorkspace(root, cfg.workdir_snapshot)
    objects: ObjectStore = snapshots.objects
    for m in cfg.mounts:
        hit = _collides(m.target, manifest)
        if hit is not None:
            raise errors.MountTargetConflict(f"mount target {m.target!r} collides with workspace file {hit!r}")
        keys = objects.list_prefix(zone, m.bucket, m.prefix)
        target_dir = root / m.target
        target_dir.mkdir(parents=True, exist_ok=True)
        count = 0
        for key in keys:
            rel = key[len(m.prefix):]
            if not rel:
                continue
            if not check_relative_path(rel):
                raise errors.InvalidKey(f"object key {key!r} does not map to a safe path under {m.target!r}")
            dest = target_dir / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            dest.write_bytes(objects.get_object(zone, m.bucket, key))
            count += 1
        if m.read_only:
            _make_read_only(target_dir)
        ws.mounted.append((m, count))
    if cfg.setup_command:
        pump = pump or LogPump(task.task_id, lambda chunk: None)
        code = run_process(list(cfg.setup_command), root, task_env(cfg, extra_env), pump)
        if code != 0:
            raise errors.SetupFailed(code)
    return ws


def execute(
    ws: PreparedWorkspace,
    cfg: RunConfig,
    pump: LogPump,
    stop: Optional[threading.Event] = None,
    extra_env: Optional[dict[str, str]] = None,
) -> int:
    return run_process(list(cfg.command), ws.root, task_env(cfg, extra_env), pump, stop)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# -- channel endpoints hosted by the agent ------------------------------------

class DebugBridge:
    """Task side of a DEBUG channel, bridged to the task's debug port.

    Frames are acked only after they were written to the task's socket, so a
    bridge restart resumes exactly where the task stopped receiving.
    """

    def __init__(self, agent: "Agent", channel_id: str, port: int, done: threading.Event) -> None:
        self.agent = agent
        self.channel_id = channel_id
        self.port = port
        self.done = done
        self.closed = threading.Event()
        self._sock: Optional[socket.socket] = None
        self._pending: list[tuple[int, bytes]] = []
        self._lock = threading.Lock()
        self.endpoint = ChannelEndpoint(
            agent.address, channel_id, "TASK", self._on_frame, self._on_status, executor_id=agent.executor_id
        )

    def start(self) -> None:
        threading.Thread(target=self._run, daemon=True, name=f"debug-{self.channel_id}").start()

    def _on_frame(self, seq: int, payload: bytes) -> None:
        with self._lock:
            if self._sock is None:
                self._pending.append((seq, payload))
                return
            self._write(seq, payload)

    def _write(self, seq: int, payload: bytes) -> None:
        assert self._sock is not None
        try:
            self._sock.sendall(payload)
        except OSError:
            return
        try:
            self.endpoint.ack(seq)
        except errors.ExpdError:
            pass

    def _on_status(self, status: str, reason: str) -> None:
        if status in ("closed", "failed", "disconnected", "detached"):
            self.closed.set()

    def _run(self) -> None:
        try:
            self.endpoint.attach(0)
        except errors.ExpdError as exc:
            log.warning("debug channel %s: attach failed: %s", self.channel_id, exc)
            return
        sock = None
        while sock is None and not self.done.is_set() and not self.closed.is_set():
            try:
                sock = socket.create_connection(("127.0.0.1", self.port), timeout=1.0)
            except OSError:
                time.sleep(0.1)
        if sock is None:
            self.endpoint.detach()
            return
        sock.settimeout(None)
        with self._lock:
            self._sock = sock
            for seq, payload in self._pending:
                self._write(seq, payload)
            self._pending.clear()
        try:
            while not self.closed.is_set():
                data = sock.recv(MAX_CHUNK)
                if not data:
                    break
                self.endpoint.send(data)
        except (OSError, errors.ExpdError):
            pass
        finally:
            sock.close()
            self.endpoint.detach()


class TerminalSession:
    """One shell per TERMINAL channel, rooted in the task workspace."""

    def __init__(self, agent: "Agent", channel_id: str, root: Path, env: dict[str, str]) -> None:
        self.agent = agent
        self.channel_id = channel_id
        self.root = root
        self.env = env
        self.proc: Optional[subprocess.Popen] = None
        self.endpoint = ChannelEndpoint(
            agent.address, channel_id, "TASK", self._on_frame, self._on_status, executor_id=agent.executor_id
        )

    def start(self) -> None:
        self.proc = subprocess.Popen(
            ["/bin/sh"],
            cwd=self.root,
            env=self.env,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
        try:
            self.endpoint.attach(0)
        except errors.ExpdError as exc:
            log.warning("terminal channel %s: attach failed: %s", self.channel_id, exc)
            self._stop_shell()
            return
        threading.Thread(target=self._read_shell, daemon=True, name=f"term-{self.channel_id}").start()

    def _on_frame(self, seq: int, payload: bytes) -> None:
        if self.proc is None or self.proc.stdin is None:
            return
        try:
            self.proc.stdin.write(payload)
            self.proc.stdin.flush()
        except (BrokenPipeError, ValueError):
            pass

    def _on_status(self, status: str, reason: str) -> None:
        if status in ("closed", "disconnected", "detached"):
            self._stop_shell()

    def _read_shell(self) -> None:
        assert self.proc is not None and self.proc.stdout is not None
        fd = self.proc.stdout.fileno()
        try:
            while True:
                data = os.read(fd, MAX_CHUNK)
                if not data:
                    break
                try:
                    self.endpoint.send(data)
                except errors.ExpdError:
                    break
        finally:
            self.proc.wait()
            try:
                rpc = self.agent.rpc
                if rpc is not None:
                    rpc.call(MsgType.CHANNEL_CLOSE, {"channel_id": self.channel_id, "reason": "SHELL_EXITED"})
            except errors.ExpdError:
                pass
            self.endpoint.detach()

    def _stop_shell(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            _signal_group(self.proc.pid, signal.SIGKILL)


# -- the agent ----------------------------------------------------------------

@dataclass
class AgentConfig:
    coordinator: str
    zone: str = "local"
    accel_type: Optional[str] = None
    accel_count: int = 0
    cpu_cores: int = 1
    memory_mb: int = 1024
    provision_delay: float = 0.0
    scratch: Optional[str] = None
    executor_id: Optional[str] = None
    poll_seconds: float = 0.2


class Agent:
    def __init__(self, config: AgentConfig) -> None:
        self.config = config
        self.address = config.coordinator
        self.executor_id = config.executor_id or f"ex-{uuid.uuid4().hex[:10]}"
        self.scratch = Path(config.scratch or Path.cwd() / ".jt" / "scratch" / self.executor_id).resolve()
        self.rpc: Optional[RpcClient] = None
        self.snapshots: Optional[SnapshotStore] = None
        self.stopping = threading.Event()
        self.current: Optional[str] = None
        self.kill = threading.Event()
        self.task_done = threading.Event()
        self.debug_port: Optional[int] = None
        self.workspaces: dict[str, Path] = {}
        self.envs: dict[str, dict[str, str]] = {}
        self._lock = threading.Lock()

    @property
    def offer(self) -> HardwareOffer:
        c = self.config
        return HardwareOffer(self.executor_id, c.accel_type, c.accel_count, c.cpu_cores, c.memory_mb, c.zone)

    # -- coordinator events --------------------------------------------

    def _on_event(self, event: dict) -> None:
        kind = event.get("event")
        if kind == "kill":
            if event.get("task_id") == self.current:
                log.info("kill directive for %s", self.current)
                self.kill.set()
        elif kind == "channel_open":
            threading.Thread(target=self._open_channel, args=(event,), daemon=True).start()
        elif kind == "release_workspaces":
            threading.Thread(target=self._release, args=(list(event.get("task_ids", [])),), daemon=True).start()
        elif kind == "disconnected":
            self.stopping.set()
            self.kill.set()

    def _open_channel(self, event: dict) -> None:
        tid = event["task_id"]
        cid = event["channel_id"]
        if event["kind"] == "DEBUG":
            with self._lock:
                port = self.debug_port if tid == self.current else None
            if port is not None:
                DebugBridge(self, cid, port, self.task_done).start()
            return
        root = self.workspaces.get(tid)
        if root is None or not root.is_dir():
            log.warning("terminal requested for %s but its workspace is gone", tid)
            return
        TerminalSession(self, cid, root, self.envs.get(tid, dict(os.environ))).start()

    def _release(self, task_ids: list[str]) -> None:
        released = []
        for tid in task_ids:
            if tid == self.current:
                continue
            root = self.workspaces.pop(tid, None) or self.scratch / tid
            remove_tree(root)
            self.envs.pop(tid, None)
            released.append(tid)
        if released and self.rpc is not None:
            try:
                self.rpc.call(MsgType.WORKSPACE_RELEASED, {"task_ids": released})
            except errors.ExpdError:
                pass

    # -- main loop -----------------------------------------------------

    def connect(self) -> None:
        if self.config.provision_delay > 0:
            log.info("simulating provisioning for %.1fs", self.config.provision_delay)
            time.sleep(self.config.provision_delay)
        self.rpc = RpcClient(self.address, role="agent", executor_id=self.executor_id, on_event=self._on_event)
        self.snapshots = SnapshotStore(ObjectStore(self.rpc.info["store_root"]))
        self.scratch.mkdir(parents=True, exist_ok=True)
        self.rpc.call(MsgType.REGISTER, {"offer": self.offer.to_dict()})
        log.info("registered executor %s in zone %s", self.executor_id, self.config.zone)
        hb = float(self.rpc.info.get("heartbeat_seconds", 5.0))
        threading.Thread(target=self._heartbeat_loop, args=(hb,), daemon=True, name="expd-heartbeat").start()

    def _heartbeat_loop(self, interval: float) -> None:
        while not self.stopping.wait(interval):
            try:
                assert self.rpc is not None
                self.rpc.notify(MsgType.HEARTBEAT, {})
            except errors.ExpdError:
                self.stopping.set()
                return

    def run_forever(self) -> None:
        self.connect()
        assert self.rpc is not None
        while not self.stopping.is_set():
            try:
                reply = self.rpc.call(MsgType.CLAIM, {})
            except errors.TransportError:
                break
            assignment = reply.get("assignment")
            if assignment is None:
                self.stopping.wait(self.config.poll_seconds)
                continue
            self.run_task(TaskRecord.from_dict(assignment["task"]))

    def stop(self) -> None:
        self.stopping.set()
        self.kill.set()
        if self.rpc is not None:
            self.rpc.close()

    def _report(self, task_id: str, event: str, exit_code: Optional[int] = None) -> Optional[dict]:
        assert self.rpc is not None
        body: dict = {"task_id": task_id, "event": event}
        if exit_code is not None:
            body["exit_code"] = exit_code
        try:
            return self.rpc.call(MsgType.REPORT, body)
        except errors.IllegalTransition as exc:
            log.info("coordinator rejected %s for %s: %s", event, task_id, exc)
        except errors.WrongExecutor as exc:
            log.info("task %s no longer ours: %s", task_id, exc)
        return None

    def run_task(self, task: TaskRecord) -> None:
        assert self.rpc is not None and self.snapshots is not None
        rpc = self.rpc
        tid = task.task_id
        self.kill.clear()
        self.task_done.clear()
        port = free_port()
        with self._lock:
            self.current = tid
            self.debug_port = port
        extra = {"EXPD_TASK_ID": tid, "EXPD_DEBUG_PORT": str(port)}
        pump = LogPump(tid, lambda chunk: rpc.notify(MsgType.LOG_APPEND, chunk.to_dict()))
        try:
            try:
                ws = prepare_workspace(task, self.scratch, self.snapshots, self.config.zone, pump, extra)
            except errors.ExpdError as exc:
                pump.emit("STDERR", f"expd: prepare failed: {exc}\n".encode())
                self.workspaces[tid] = self.scratch / tid
                self._report(tid, "fail_prepare")
                return
            self.workspaces[tid] = ws.root
            self.envs[tid] = task_env(task.run_config, extra)
            started = self._report(tid, "begin_run")
            if started is None:
                return
            for ch in started.get("channels", []):
                self._open_channel({"task_id": tid, **ch})
            code = execute(ws, task.run_config, pump, self.kill, extra)
            self._report(tid, "finish", code)
        finally:
            self.task_done.set()
            with self._lock:
                self.current = None
                self.debug_port = None
