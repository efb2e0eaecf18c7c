from __future__ import annotations

import hashlib
import os
import random
import socket
import stat
import subprocess
import sys
import time
from pathlib import Path
from typing import Iterator, Optional

import pytest

from expd.client import RpcClient
from expd.model import HardwareSpec, RunConfig
from expd.objstore import ObjectStore
from expd.snapshot import SnapshotStore


def random_tree(root: Path, rng: random.Random, max_files: int = 200, max_size: int = 64 * 1024) -> Path:
    """Random workspace: nested dirs up to depth 5, random exec bits, a few symlinks."""
    root.mkdir(parents=True, exist_ok=True)
    nfiles = rng.randint(0, max_files)
    made: list[str] = []
    for i in range(nfiles):
        depth = rng.randint(0, 4)
        parts = [f"d{rng.randint(0, 3)}" for _ in range(depth)] + [f"f{i}.bin"]
        rel = "/".join(parts)
        p = root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        size = rng.choice([0, 1, rng.randint(0, 512), rng.randint(0, max_size)])
        p.write_bytes(rng.randbytes(size))
        os.chmod(p, 0o755 if rng.random() < 0.3 else 0o644)
        made.append(rel)
    for j in range(rng.randint(0, 3)):
        target = rng.choice(made) if made and rng.random() < 0.7 else f"dangling-{j}"
        (root / f"link{j}").symlink_to(target)
    return root


def walk_tree(root: Path) -> dict[str, tuple]:
    """Independent view of a tree: file bytes digest plus exec bit, or link target."""
    out: dict[str, tuple] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        for name in dirnames + filenames:
            p = Path(dirpath) / name
            rel = p.relative_to(root).as_posix()
            if rel == ".jt" or rel.startswith(".jt/"):
                continue
            st = os.lstat(p)
            if stat.S_ISLNK(st.st_mode):
                out[rel] = ("link", os.readlink(p))
            elif stat.S_ISREG(st.st_mode):
                out[rel] = ("file", hashlib.sha256(p.read_bytes()).hexdigest(), bool(st.st_mode & 0o111))
    return out


def cfg(sid: str = "s" * 64, **hw) -> RunConfig:
    return RunConfig(command=("true",), workdir_snapshot=sid, hardware=HardwareSpec(**hw))


@pytest.fixture
def objects(tmp_path: Path) -> ObjectStore:
    return ObjectStore(tmp_path / "store")


@pytest.fixture
def snapshots(objects: ObjectStore) -> SnapshotStore:
    return SnapshotStore(objects)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_until(pred, timeout: float = 20.0, interval: float = 0.05):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = pred()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError("condition not met within timeout")


class Cluster:
    """A daemon subprocess plus optional agent subprocesses on localhost."""

    def __init__(self, base: Path) -> None:
        self.base = base
        self.state_dir = base / "state"
        self.port = free_port()
        self.address = f"127.0.0.1:{self.port}"
        self.daemon: Optional[subprocess.Popen] = None
        self.agents: list[subprocess.Popen] = []
        self.env = dict(os.environ, EXPD_COORDINATOR=self.address, EXPD_STATE_DIR=str(self.state_dir))

    def expd(self, *args: str, cwd: Optional[Path] = None, input: Optional[bytes] = None,
             timeout: float = 60.0) -> subprocess.CompletedProcess:
        return subprocess.run(
            [sys.executable, "-m", "expd.cli", *args],
            cwd=cwd or self.base, env=self.env, input=input, capture_output=True, timeout=timeout,
        )

    def start_daemon(self, *extra: str) -> None:
        log = open(self.base / "daemon.log", "ab")
        self.daemon = subprocess.Popen(
            [sys.executable, "-m", "expd.cli", "daemon", "run", "--port", str(self.port),
             "--state-dir", str(self.state_dir), "--no-fsync", "--tick-seconds", "0.2", *extra],
            env=self.env, stdout=log, stderr=log,
        )
        wait_until(self._reachable, timeout=15)

    def _reachable(self) -> bool:
        try:
            RpcClient(self.address).close()
            return True
        except Exception:
            return False

    def start_agent(self, *extra: str) -> subprocess.Popen:
        log = open(self.base / f"agent{len(self.agents)}.log", "ab")
        proc = subprocess.Popen(
            [sys.executable, "-m", "expd.cli", "executor", "run",
             "--scratch", str(self.base / f"scratch{len(self.agents)}"), *extra],
            env=self.env, stdout=log, stderr=log,
        )
        self.agents.append(proc)
        return proc

    def rpc(self) -> RpcClient:
        return RpcClient(self.address)

    def task(self, task_id: str) -> dict:
        c = self.rpc()
        try:
            from expd.wire import MsgType
            return c.call(MsgType.STATUS, {"task_id": task_id})["tasks"][0]
        finally:
            c.close()

    def task_ids(self) -> list[str]:
        c = self.rpc()
        try:
            from expd.wire import MsgType
            return [t["task_id"] for t in c.call(MsgType.STATUS, {})["tasks"]]
        finally:
            c.close()

    def wait_state(self, task_id: str, states: set[str], timeout: float = 30.0) -> dict:
        return wait_until(lambda: (t := self.task(task_id))["state"] in states and t, timeout=timeout)

    def stop(self) -> None:
        for p in self.agents + ([self.daemon] if self.daemon else []):
            if p.poll() is None:
                p.terminate()
        for p in self.agents + ([self.daemon] if self.daemon else []):
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()


@pytest.fixture
def cluster(tmp_path: Path) -> Iterator[Cluster]:
    c = Cluster(tmp_path)
    try:
        yield c
    finally:
        c.stop()


# -- acceptance reporting ---------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config) -> None:
    config.addinivalue_line("markers", "acceptance(number, title): one acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _ACCEPTANCE[number] = ("PASS" if report.passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter) -> None:
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        verdict, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {verdict} - {title}")
