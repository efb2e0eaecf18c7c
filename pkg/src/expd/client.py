"""Client side of the daemon protocol: request/reply calls and channel endpoints."""

from __future__ import annotations

import itertools
import logging
import os
import queue
import threading
from typing import Any, Callable, Optional

from expd import canonical, errors
from expd.wire import PROTOCOL_VERSION, Connection, MsgType

log = logging.getLogger(__name__)

DEFAULT_ADDRESS = "127.0.0.1:7077"


def default_address() -> str:
    return os.environ.get("EXPD_COORDINATOR", DEFAULT_ADDRESS)


class RpcClient:
    """One framed connection with a reader thread.

    Replies are matched to calls by ``rid``; server-pushed events go to
    ``on_event`` (or the ``events`` queue when no callback is given).
    """

    def __init__(
        self,
        address: str,
        role: str = "cli",
        executor_id: Optional[str] = None,
        on_event: Optional[Callable[[dict], None]] = None,
        timeout: float = 5.0,
    ) -> None:
        self.address = address
        self.conn = Connection.connect(address, timeout=timeout)
        self.events: "queue.Queue[Optional[dict]]" = queue.Queue()
        self._on_event = on_event
        self._rids = itertools.count(1)
        self._waiting: dict[int, "queue.Queue[tuple[int, dict]]"] = {}
        self._lock = threading.Lock()
        self.closed = threading.Event()
        self._reader = threading.Thread(target=self._read_loop, name="expd-rpc-reader", daemon=True)
        self._reader.start()
        hello: dict[str, Any] = {"version": PROTOCOL_VERSION, "role": role}
        if executor_id:
            hello["executor_id"] = executor_id
        self.info = self.call(MsgType.HELLO, hello)

    def _read_loop(self) -> None:
        try:
            while True:
                frame = self.conn.recv()
                if frame is None:
                    break
                msg_type, body = frame
                if msg_type in (MsgType.REPLY, MsgType.ERROR):
                    msg = canonical.loads(body)
                    with self._lock:
                        waiter = self._waiting.pop(msg.get("rid"), None)
                    if waiter is not None:
                        waiter.put((msg_type, msg))
                    else:
                        log.debug("unmatched reply %s", msg)
                elif msg_type == MsgType.EVENT:
                    event = canonical.loads(body)
                    if self._on_event is not None:
                        self._on_event(event)
                    else:
                        self.events.put(event)
        except errors.ExpdError as exc:
            log.debug("connection to %s ended: %s", self.address, exc)
        finally:
            self.closed.set()
            with self._lock:
                waiting = list(self._waiting.values())
                self._waiting.clear()
            for w in waiting:
                w.put((MsgType.ERROR, {"error": "TransportError", "message": "connection closed"}))
            if self._on_event is not None:
                self._on_event({"event": "disconnected"})
            else:
                self.events.put(None)

    def call(self, msg_type: int, body: Optional[dict] = None, timeout: Optional[float] = 30.0) -> dict:
        body = dict(body or {})
        rid = next(self._rids)
        body["rid"] = rid
        waiter: "queue.Queue[tuple[int, dict]]" = queue.Queue(maxsize=1)
        with self._lock:
            if self.closed.is_set():
                raise errors.TransportError("connection closed")
            self._waiting[rid] = waiter
        self.conn.send_json(msg_type, body)
        try:
            kind, msg = waiter.get(timeout=timeout)
        except queue.Empty:
            with self._lock:
                self._waiting.pop(rid, None)
            raise errors.TransportError(f"no reply within {timeout}s") from None
        if kind == MsgType.ERROR:
            raise errors.error_from_wire(msg.get("error", "ExpdError"), msg.get("message", ""))
        return msg

    def notify(self, msg_type: int, body: dict) -> None:
        """Fire-and-forget message (no rid, no reply)."""
        self.conn.send_json(msg_type, body)

    def close(self) -> None:
        self.conn.close()
        self._reader.join(timeout=2)


class ChannelEndpoint:
    """One side of a relay channel over its own connection.

    Incoming frames are numbered from ``resume_from + 1``; the relay replays
    and delivers them contiguously, so the counter is the frame's seq.
    """

    def __init__(
        self,
        address: str,
        channel_id: str,
        side: str,
        on_frame: Callable[[int, bytes], None],
        on_status: Callable[[str, str], None] = lambda status, reason: None,
        executor_id: Optional[str] = None,
    ) -> None:
        self.address = address
        self.channel_id = channel_id
        self.side = side
        self.on_frame = on_frame
        self.on_status = on_status
        self.executor_id = executor_id
        self.conn: Optional[Connection] = None
        self.received = 0
        self.sent_high = 0
        self.kind = ""
        self.closed = threading.Event()
        self.peer_attached = threading.Event()
        self._reader: Optional[threading.Thread] = None

    @property
    def send_type(self) -> int:
        return MsgType.CHANNEL_DATA_C2T if self.side == "CLIENT" else MsgType.CHANNEL_DATA_T2C

    def attach(self, resume_from: int, timeout: float = 10.0) -> int:
        """Connect and attach; returns the relay's high seq for our outgoing direction."""
        conn = Connection.connect(self.address)
        hello: dict[str, Any] = {"version": PROTOCOL_VERSION, "role": "channel", "rid": 0}
        if self.executor_id:
            hello["executor_id"] = self.executor_id
        conn.send_json(MsgType.HELLO, hello)
        self._expect_reply(conn, timeout)
        conn.send_json(
            MsgType.CHANNEL_ATTACH,
            {"rid": 1, "channel_id": self.channel_id, "side": self.side, "resume_from": resume_from},
        )
        reply = self._expect_reply(conn, timeout)
        self.conn = conn
        self.received = resume_from
        self.sent_high = reply["sent_high"]
        self.kind = reply.get("kind", "")
        if reply.get("peer_attached"):
            self.peer_attached.set()
        self.closed.clear()
        self._reader = threading.Thread(target=self._read_loop, args=(conn,), daemon=True, name="expd-channel")
        self._reader.start()
        return self.sent_high

    @staticmethod
    def _expect_reply(conn: Connection, timeout: float) -> dict:
        conn.sock.settimeout(timeout)
        try:
            frame = conn.recv()
        finally:
            conn.sock.settimeout(None)
        if frame is None:
            raise errors.TransportError("connection closed during attach")
        msg_type, body = frame
        msg = canonical.loads(body)
        if msg_type == MsgType.ERROR:
            conn.close()
            raise errors.error_from_wire(msg.get("error", "ExpdError"), msg.get("message", ""))
        if msg_type != MsgType.REPLY:
            conn.close()
            raise errors.ProtocolError(f"expected a reply, got type 0x{msg_type:02x}")
        return msg

    def _read_loop(self, conn: Connection) -> None:
        try:
            while True:
                frame = conn.recv()
                if frame is None:
                    break
                msg_type, body = frame
                if msg_type in (MsgType.CHANNEL_DATA_C2T, MsgType.CHANNEL_DATA_T2C):
                    self.received += 1
                    self.on_frame(self.received, body)
                elif msg_type == MsgType.EVENT:
                    event = canonical.loads(body)
                    status = event.get("status", "")
                    if status == "peer_attached":
                        self.peer_attached.set()
                    elif status == "peer_detached":
                        self.peer_attached.clear()
                    self.on_status(status, event.get("reason", ""))
                elif msg_type == MsgType.ERROR:
                    msg = canonical.loads(body)
                    self.on_status("error", f"{msg.get('error')}: {msg.get('message')}")
        except errors.ExpdError as exc:
            log.debug("channel %s connection ended: %s", self.channel_id, exc)
        finally:
            if conn is self.conn:
                self.closed.set()
                self.on_status("disconnected", "")

    def send(self, payload: bytes) -> None:
        if self.conn is None:
            raise errors.NotAttached("channel endpoint is not attached")
        self.conn.send(self.send_type, payload)

    def ack(self, seq: int) -> None:
        if self.conn is None:
            raise errors.NotAttached("channel endpoint is not attached")
        self.conn.send_json(MsgType.CHANNEL_ACK, {"seq": seq})

    def detach(self) -> None:
        conn, self.conn = self.conn, None
        if conn is not None:
            conn.close()
        if self._reader is not None and self._reader is not threading.current_thread():
            self._reader.join(timeout=2)
        self.closed.set()
