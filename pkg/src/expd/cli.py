"""``expd`` command line.

Exit codes: 0 success, 1 task failure (``--follow``), 2 usage or validation,
3 not found, 4 transport.
"""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import signal
import socket
import sys
import threading
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Sequence

from expd import __version__, canonical, errors
from expd.client import ChannelEndpoint, RpcClient, default_address
from expd.model import TERMINAL_STATES, HardwareSpec, MountSpec, RunConfig, validate_run_config
from expd.objstore import ObjectStore
from expd.persist import LogChunk
from expd.snapshot import SnapshotStore
from expd.wire import MsgType

log = logging.getLogger("expd")

EXIT_OK = 0
EXIT_TASK_FAILED = 1
EXIT_USAGE = 2
EXIT_NOT_FOUND = 3
EXIT_TRANSPORT = 4

LAST_SNAPSHOT = Path(".jt") / "last_snapshot"
TERMINAL_NAMES = {s.value for s in TERMINAL_STATES}


def _client_zone(args: argparse.Namespace) -> str:
    return args.client_zone or os.environ.get("EXPD_CLIENT_ZONE", "local")


def _connect(args: argparse.Namespace) -> RpcClient:
    return RpcClient(args.coordinator)


def _store(rpc: RpcClient) -> SnapshotStore:
    return SnapshotStore(ObjectStore(rpc.info["store_root"]))


# -- parsing helpers ----------------------------------------------------------

def parse_accel(value: str) -> tuple[str, int]:
    name, sep, count = value.rpartition(":")
    if not sep or not name or not count.isdigit():
        raise errors.ValidationError(f"--accel expects TYPE:COUNT, got {value!r}")
    return name, int(count)


def parse_mount(value: str) -> MountSpec:
    parts = value.split(":")
    if len(parts) != 3 or not parts[0] or not parts[2]:
        raise errors.ValidationError(f"--mount expects BUCKET:PREFIX:TARGET, got {value!r}")
    return MountSpec(parts[0], parts[1], parts[2])


def parse_env(value: str) -> tuple[str, str]:
    name, sep, val = value.partition("=")
    if not sep:
        raise errors.ValidationError(f"--env expects NAME=VALUE, got {value!r}")
    return name, val


def parse_cursor(value: str) -> dict[str, int]:
    if value.isdigit():
        return {"STDOUT": int(value), "STDERR": int(value)}
    cursor = {"STDOUT": 0, "STDERR": 0}
    for part in value.split(","):
        stream, _, num = part.partition("=")
        stream = stream.upper()
        if stream not in cursor or not num.isdigit():
            raise errors.ValidationError(f"--from expects N or STDOUT=N,STDERR=M, got {value!r}")
        cursor[stream] = int(num)
    return cursor


def build_run_config(args: argparse.Namespace, command: Sequence[str], snapshot_id: str) -> RunConfig:
    accel_type, accel_count = (None, 0)
    if args.accel:
        accel_type, accel_count = parse_accel(args.accel)
    hardware = HardwareSpec(accel_type, accel_count, args.cpu, args.memory_mb)
    return RunConfig(
        command=tuple(command),
        workdir_snapshot=snapshot_id,
        env=tuple(parse_env(e) for e in args.env),
        setup_command=tuple(shlex.split(args.setup)) if args.setup else None,
        mounts=tuple(parse_mount(m) for m in args.mount),
        hardware=hardware,
    )


# -- output -------------------------------------------------------------------

def _fmt_time(ts: Optional[float]) -> str:
    if ts is None:
        return "-"
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


TIME_FIELDS = ("submit_time", "start_time", "end_time")


def render_tasks(tasks: list[dict], as_json: bool, times: bool) -> str:
    if as_json:
        if not times:
            tasks = [{k: v for k, v in t.items() if k not in TIME_FIELDS} for t in tasks]
        return canonical.dumps(tasks)
    header = ["TASK", "STATE", "EXECUTOR"]
    if times:
        header += ["SUBMITTED", "STARTED", "ENDED"]
    header += ["EXIT"]
    rows = [header]
    for t in tasks:
        row = [t["task_id"], t["state"], t.get("executor_id") or "-"]
        if times:
            row += [_fmt_time(t.get(f)) for f in TIME_FIELDS]
        row += ["-" if t.get("exit_code") is None else str(t["exit_code"])]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def render_executors(executors: list[dict], as_json: bool) -> str:
    if as_json:
        return canonical.dumps(executors)
    rows = [["EXECUTOR", "ZONE", "ACCEL", "CPU", "MEMORY_MB", "STATE"]]
    for e in executors:
        o = e["offer"]
        accel = f"{o['accel_type']}:{o['accel_count']}" if o["accel_count"] else "-"
        state = "lost" if not e["connected"] else (f"busy {e['busy_with']}" if e["busy_with"] else "idle")
        rows.append([e["executor_id"], o["zone"], accel, str(o["cpu_cores"]), str(o["memory_mb"]), state])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def _out(text: str) -> None:
    sys.stdout.write(text + "\n")
    sys.stdout.flush()


# -- log streaming ------------------------------------------------------------

def stream_logs(rpc: RpcClient, task_id: str, cursor: dict[str, int], follow: bool) -> dict:
    """Write chunks to stdout/stderr until the server ends the stream; returns the end event."""
    rpc.call(MsgType.LOG_SUBSCRIBE, {"task_id": task_id, "from": cursor, "follow": follow})
    while True:
        event = rpc.events.get()
        if event is None:
            raise errors.TransportError("coordinator connection lost while streaming logs")
        if event.get("event") == "log" and event.get("task_id") == task_id:
            chunk = LogChunk.from_dict(event)
            out = sys.stdout if chunk.stream == "STDOUT" else sys.stderr
            out.buffer.write(chunk.data)
            out.flush()
        elif event.get("event") == "log_end" and event.get("task_id") == task_id:
            return event


def _task_exit(end: dict) -> int:
    return EXIT_OK if end.get("state") == "SUCCEEDED" else EXIT_TASK_FAILED


# -- commands -----------------------------------------------------------------

def cmd_launch(args: argparse.Namespace) -> int:
    workdir = Path(args.workdir or ".").resolve()
    # validate before touching the network so usage errors stay exit code 2
    validate_run_config(build_run_config(args, args.command, "pending"))
    client_zone = _client_zone(args)
    rpc = _connect(args)
    try:
        store = _store(rpc)
        cache = workdir / LAST_SNAPSHOT
        parent = None
        if not args.no_parent and cache.is_file():
            parent = cache.read_text().strip() or None
            if parent and not store.has_snapshot(client_zone, parent):
                log.warning("cached parent snapshot %s is gone; uploading without a parent", parent)
                parent = None
        sid, report = store.upload_snapshot(workdir, parent, client_zone)
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(sid + "\n")
        _out(f"snapshot {sid}")
        _out(f"upload {canonical.dumps(report.to_dict())}")
        if args.zone and args.zone != client_zone:
            rep = store.replicate_snapshot(sid, client_zone, args.zone)
            _out(f"replicate {rep.to_json()}")
        cfg = validate_run_config(build_run_config(args, args.command, sid))
        reply = rpc.call(
            MsgType.SUBMIT,
            {"run_config": cfg.to_dict(), "origin_zone": client_zone, "workspace": str(workdir)},
        )
        task_id = reply["task_id"]
        _out(f"task {task_id}")
        if not args.follow:
            return EXIT_OK
        end = stream_logs(rpc, task_id, {"STDOUT": 0, "STDERR": 0}, follow=True)
        return _task_exit(end)
    finally:
        rpc.close()


def cmd_status(args: argparse.Namespace) -> int:
    rpc = _connect(args)
    try:
        if getattr(args, "executors", False):
            _out(render_executors(rpc.call(MsgType.STATUS, {"executors": True})["executors"], args.json))
            return EXIT_OK
        body = {"task_id": args.task_id} if getattr(args, "task_id", None) else {}
        tasks = rpc.call(MsgType.STATUS, body)["tasks"]
        _out(render_tasks(tasks, args.json, not args.no_times))
        return EXIT_OK
    finally:
        rpc.close()


def cmd_logs(args: argparse.Namespace) -> int:
    rpc = _connect(args)
    try:
        cursor = parse_cursor(args.from_seq) if args.from_seq else {"STDOUT": 0, "STDERR": 0}
        stream_logs(rpc, args.task_id, cursor, args.follow)
        return EXIT_OK
    finally:
        rpc.close()


def cmd_cancel(args: argparse.Namespace) -> int:
    rpc = _connect(args)
    try:
        rec = rpc.call(MsgType.CANCEL, {"task_id": args.task_id})["task"]
        _out(f"task {rec['task_id']} {rec['state']}")
        return EXIT_OK
    finally:
        rpc.close()


def cmd_reproduce(args: argparse.Namespace) -> int:
    rpc = _connect(args)
    try:
        task = rpc.call(MsgType.STATUS, {"task_id": args.task_id})["tasks"][0]
        sid = task["run_config"]["workdir_snapshot"]
        if args.dest:
            _store(rpc).materialize(sid, args.dest, task["origin_zone"])
            _out(f"snapshot {sid}")
            _out(f"restored {Path(args.dest).resolve()}")
            return EXIT_OK
        new_id = rpc.call(MsgType.REPRODUCE, {"task_id": args.task_id})["task_id"]
        _out(f"snapshot {sid}")
        _out(f"task {new_id}")
        if args.follow:
            return _task_exit(stream_logs(rpc, new_id, {"STDOUT": 0, "STDERR": 0}, follow=True))
        return EXIT_OK
    finally:
        rpc.close()


def cmd_gc(args: argparse.Namespace) -> int:
    rpc = _connect(args)
    try:
        report = rpc.call(MsgType.GC, {"keep_last": args.keep_last})
        report.pop("rid", None)
        _out(canonical.dumps(report))
        return EXIT_OK
    finally:
        rpc.close()


def cmd_put(args: argparse.Namespace) -> int:
    rpc = _connect(args)
    try:
        objects = ObjectStore(rpc.info["store_root"])
        data = Path(args.file).read_bytes()
        ref = objects.put_object(_client_zone(args), args.bucket, args.key, data)
        _out(f"put {ref.zone}:{ref.bucket}/{ref.key} {ref.size} {ref.digest}")
        return EXIT_OK
    finally:
        rpc.close()


def cmd_ls(args: argparse.Namespace) -> int:
    rpc = _connect(args)
    try:
        objects = ObjectStore(rpc.info["store_root"])
        for key in objects.list_prefix(_client_zone(args), args.bucket, args.prefix):
            _out(key)
        return EXIT_OK
    finally:
        rpc.close()


def cmd_attach(args: argparse.Namespace) -> int:
    """Interactive terminal; ``~.`` at the start of a line detaches."""
    rpc = _connect(args)
    try:
        cid = rpc.call(MsgType.CHANNEL_OPEN, {"task_id": args.task_id, "kind": "TERMINAL", "reuse": True})[
            "channel_id"
        ]
    finally:
        rpc.close()
    ended = threading.Event()
    last_output = [time.monotonic()]

    def on_frame(seq: int, payload: bytes) -> None:
        last_output[0] = time.monotonic()
        sys.stdout.buffer.write(payload)
        sys.stdout.flush()

    def on_status(status: str, reason: str) -> None:
        if status in ("closed", "failed", "disconnected", "detached"):
            ended.set()

    ep = ChannelEndpoint(args.coordinator, cid, "CLIENT", on_frame, on_status)
    ep.attach(0)
    if not ep.peer_attached.wait(args.wait):
        ep.detach()
        raise errors.TaskTerminal(f"no shell attached to task {args.task_id} within {args.wait}s")
    try:
        for line in iter(sys.stdin.buffer.readline, b""):
            if line.rstrip(b"\r\n") == b"~." or ended.is_set():
                break
            ep.send(line)
        # let in-flight output drain before detaching
        deadline = time.monotonic() + args.drain
        while not ended.is_set() and time.monotonic() < deadline:
            if time.monotonic() - last_output[0] > 0.3:
                break
            time.sleep(0.05)
    finally:
        ep.detach()
    return EXIT_OK


class LocalDebugBridge:
    """Bridges a local debugger socket to the task's DEBUG channel.

    Each local connection attaches the channel; a reconnecting local client
    resumes after the last frame this bridge wrote out.
    """

    def __init__(
        self,
        address: str,
        channel_id: str,
        listen: tuple[str, int],
        alive: Callable[[], bool] = lambda: True,
    ) -> None:
        self.address = address
        self.alive = alive
        self.channel_id = channel_id
        self.listener = socket.create_server(listen)
        self.delivered = 0
        self.outbound: list[bytes] = []
        self.ended = threading.Event()
        self.end_reason = ""

    @property
    def port(self) -> int:
        return self.listener.getsockname()[1]

    def serve(self) -> None:
        self.listener.settimeout(0.2)
        last_check = time.monotonic()
        try:
            while not self.ended.is_set():
                try:
                    local, _ = self.listener.accept()
                except socket.timeout:
                    if time.monotonic() - last_check > 1.0:
                        last_check = time.monotonic()
                        if not self.alive():
                            self.end_reason = self.end_reason or "TASK_TERMINAL"
                            self.ended.set()
                    continue
                self._session(local)
        finally:
            self.listener.close()

    def _session(self, local: socket.socket) -> None:
        local.settimeout(None)
        lock = threading.Lock()

        def on_frame(seq: int, payload: bytes) -> None:
            with lock:
                try:
                    local.sendall(payload)
                except OSError:
                    return
                self.delivered = seq
                try:
                    ep.ack(seq)
                except errors.ExpdError:
                    pass

        def on_status(status: str, reason: str) -> None:
            if status in ("closed", "failed"):
                self.end_reason = reason or status
                self.ended.set()
                try:
                    local.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

        ep = ChannelEndpoint(self.address, self.channel_id, "CLIENT", on_frame, on_status)
        with lock:
            sent_high = ep.attach(self.delivered)
            for payload in self.outbound[sent_high:]:
                ep.send(payload)
        try:
            while not self.ended.is_set():
                try:
                    data = local.recv(64 * 1024)
                except OSError:
                    break
                if not data:
                    break
                self.outbound.append(data)
                ep.send(data)
        except errors.ExpdError:
            pass
        finally:
            ep.detach()
            local.close()


def cmd_debug(args: argparse.Namespace) -> int:
    host, _, port = args.listen.rpartition(":")
    rpc = _connect(args)
    try:
        cid = rpc.call(MsgType.CHANNEL_OPEN, {"task_id": args.task_id, "kind": "DEBUG"})["channel_id"]
    finally:
        rpc.close()
    def alive() -> bool:
        try:
            probe = RpcClient(args.coordinator)
        except errors.ExpdError:
            return True
        try:
            task = probe.call(MsgType.STATUS, {"task_id": args.task_id})["tasks"][0]
        finally:
            probe.close()
        return task["state"] not in TERMINAL_NAMES

    bridge = LocalDebugBridge(args.coordinator, cid, (host or "127.0.0.1", int(port or 0)), alive)
    _out(f"debug {cid} listening on {host or '127.0.0.1'}:{bridge.port}")
    bridge.serve()
    _out(f"debug channel closed: {bridge.end_reason}")
    return EXIT_OK


def cmd_daemon_run(args: argparse.Namespace) -> int:
    from expd.daemon import Coordinator, DaemonServer
    from expd.relay import ChannelRelay
    from expd.scheduler import SchedulerConfig

    config = SchedulerConfig(
        lease_seconds=args.lease_seconds,
        heartbeat_seconds=args.heartbeat_seconds,
        max_retries=args.max_retries,
        tick_seconds=args.tick_seconds,
    )
    relay = ChannelRelay(args.channel_frames, args.channel_bytes)
    coord = Coordinator(args.state_dir, config, store_root=args.store_dir, fsync=not args.no_fsync, relay=relay)
    server = DaemonServer(coord, args.host, args.port)
    stop = threading.Event()

    def handle(signum, frame) -> None:
        stop.set()

    signal.signal(signal.SIGINT, handle)
    signal.signal(signal.SIGTERM, handle)
    server.start()
    _out(f"expd daemon listening on {server.address} state={coord.state_dir}")
    stop.wait()
    server.stop()
    _out("expd daemon stopped")
    return EXIT_OK


def cmd_executor_run(args: argparse.Namespace) -> int:
    from expd.agent import Agent, AgentConfig

    agent = Agent(
        AgentConfig(
            coordinator=args.coordinator,
            zone=args.zone,
            accel_type=args.accel_type,
            accel_count=args.accel_count,
            cpu_cores=args.cpu,
            memory_mb=args.memory_mb,
            provision_delay=args.provision_delay,
            scratch=args.scratch,
            executor_id=args.executor_id,
        )
    )

    def handle(signum, frame) -> None:
        agent.stop()

    signal.signal(signal.SIGINT, handle)
    signal.signal(signal.SIGTERM, handle)
    agent.run_forever()
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expd", description="Launch experiments on remote executors.")
    p.add_argument("--version", action="version", version=f"expd {__version__}")
    p.add_argument("--coordinator", default=default_address(), help="host:port (env EXPD_COORDINATOR)")
    p.add_argument("--client-zone", default=None, help="zone uploads land in (env EXPD_CLIENT_ZONE)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    launch = sub.add_parser("launch", help="snapshot the workspace and submit a run (command after --)")
    launch.add_argument("--workdir")
    launch.add_argument("--accel", help="TYPE:COUNT")
    launch.add_argument("--cpu", type=int, default=1)
    launch.add_argument("--memory-mb", type=int, default=256)
    launch.add_argument("--mount", action="append", default=[], help="BUCKET:PREFIX:TARGET")
    launch.add_argument("--env", action="append", default=[], help="NAME=VALUE")
    launch.add_argument("--setup", help="setup command run before the main command")
    launch.add_argument("--zone", help="replicate the snapshot into this zone before submitting")
    launch.add_argument("--no-parent", action="store_true", help="ignore .jt/last_snapshot")
    launch.add_argument("--follow", action="store_true")
    launch.set_defaults(func=cmd_launch)

    status = sub.add_parser("status", help="show one task or all tasks")
    status.add_argument("task_id", nargs="?")
    status.add_argument("--json", action="store_true")
    status.add_argument("--no-times", action="store_true")
    status.set_defaults(func=cmd_status)

    ps = sub.add_parser("ps", help="list tasks, or executors with --executors")
    ps.add_argument("--executors", action="store_true")
    ps.add_argument("--json", action="store_true")
    ps.add_argument("--no-times", action="store_true")
    ps.set_defaults(func=cmd_status, task_id=None)

    logs = sub.add_parser("logs", help="print task output")
    logs.add_argument("task_id")
    logs.add_argument("--follow", action="store_true")
    logs.add_argument("--from", dest="from_seq", help="N or STDOUT=N,STDERR=M")
    logs.set_defaults(func=cmd_logs)

    cancel = sub.add_parser("cancel", help="cancel a queued or running task")
    cancel.add_argument("task_id")
    cancel.set_defaults(func=cmd_cancel)

    attach = sub.add_parser("attach", help="terminal in the task workspace (~. detaches)")
    attach.add_argument("task_id")
    attach.add_argument("--wait", type=float, default=30.0, help="seconds to wait for the shell")
    attach.add_argument("--drain", type=float, default=5.0, help=argparse.SUPPRESS)
    attach.set_defaults(func=cmd_attach)

    debug = sub.add_parser("debug", help="bridge a local debugger to the task's DEBUG channel")
    debug.add_argument("task_id")
    debug.add_argument("--listen", default="127.0.0.1:0")
    debug.set_defaults(func=cmd_debug)

    repro = sub.add_parser("reproduce", help="restore or re-run a past task")
    repro.add_argument("task_id")
    mode = repro.add_mutually_exclusive_group(required=True)
    mode.add_argument("--dest")
    mode.add_argument("--launch", action="store_true")
    repro.add_argument("--follow", action="store_true")
    repro.set_defaults(func=cmd_reproduce)

    gc = sub.add_parser("gc", help="drop snapshots outside the retention policy")
    gc.add_argument("--keep-last", type=int, default=1)
    gc.set_defaults(func=cmd_gc)

    put = sub.add_parser("put", help="upload a file as an object in the client zone")
    put.add_argument("bucket")
    put.add_argument("key")
    put.add_argument("file")
    put.set_defaults(func=cmd_put)

    ls = sub.add_parser("ls", help="list objects in the client zone")
    ls.add_argument("bucket")
    ls.add_argument("prefix", nargs="?", default="")
    ls.set_defaults(func=cmd_ls)

    from expd.daemon import DEFAULT_PORT, default_state_dir

    daemon = sub.add_parser("daemon", help="run the coordinator").add_subparsers(dest="daemon_cmd", required=True)
    drun = daemon.add_parser("run")
    drun.add_argument("--state-dir", default=default_state_dir())
    drun.add_argument("--store-dir", default=None)
    drun.add_argument("--host", default="127.0.0.1")
    drun.add_argument("--port", type=int, default=DEFAULT_PORT)
    drun.add_argument("--lease-seconds", type=float, default=15.0)
    drun.add_argument("--heartbeat-seconds", type=float, default=5.0)
    drun.add_argument("--tick-seconds", type=float, default=1.0)
    drun.add_argument("--max-retries", type=int, default=2)
    drun.add_argument("--channel-frames", type=int, default=1024)
    drun.add_argument("--channel-bytes", type=int, default=16 << 20)
    drun.add_argument("--no-fsync", action="store_true")
    drun.set_defaults(func=cmd_daemon_run)

    executor = sub.add_parser("executor", help="run an executor agent").add_subparsers(dest="executor_cmd", required=True)
    erun = executor.add_parser("run")
    erun.add_argument("--zone", default="local")
    erun.add_argument("--accel-type")
    erun.add_argument("--accel-count", type=int, default=0)
    erun.add_argument("--cpu", type=int, default=1)
    erun.add_argument("--memory-mb", type=int, default=1024)
    erun.add_argument("--provision-delay", type=float, default=0.0)
    erun.add_argument("--scratch")
    erun.add_argument("--executor-id")
    erun.set_defaults(func=cmd_executor_run)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command: list[str] = []
    if "--" in argv:
        cut = argv.index("--")
        argv, command = argv[:cut], argv[cut + 1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    args.command = command
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if command and args.cmd != "launch":
        parser.error("a command after -- is only accepted by launch")
    try:
        return args.func(args)
    except errors.ExpdError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
