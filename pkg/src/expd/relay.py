"""Buffered, resumable byte-frame channels between a local client and a task.

DEBUG channels are lossless: every frame stays buffered until the receiving
side acks it, and a side that re-attaches with its last-received seq gets the
remainder replayed in order. TERMINAL channels are live-only; frames sent
while the other side is away are counted and dropped.

Receivers are represented by a :class:`Sink`. Sinks are invoked while the
channel lock is held and must not block (the daemon's sinks only enqueue).
"""

from __future__ import annotations

import itertools
import logging
import threading
import uuid
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Protocol

from expd import errors

log = logging.getLogger(__name__)

MAX_PAYLOAD = 1 << 20
DEFAULT_CAPACITY_FRAMES = 1024
DEFAULT_CAPACITY_BYTES = 16 << 20


class ChannelKind(str, Enum):
    DEBUG = "DEBUG"
    TERMINAL = "TERMINAL"


class Side(str, Enum):
    CLIENT = "CLIENT"
    TASK = "TASK"

    @property
    def other(self) -> "Side":
        return Side.TASK if self is Side.CLIENT else Side.CLIENT


class Direction(str, Enum):
    CLIENT_TO_TASK = "CLIENT_TO_TASK"
    TASK_TO_CLIENT = "TASK_TO_CLIENT"


def outgoing(side: Side) -> Direction:
    return Direction.CLIENT_TO_TASK if side is Side.CLIENT else Direction.TASK_TO_CLIENT


def incoming(side: Side) -> Direction:
    return Direction.TASK_TO_CLIENT if side is Side.CLIENT else Direction.CLIENT_TO_TASK


class ChannelStatus(str, Enum):
    OPEN = "OPEN"
    FAILED = "FAILED"


class Sink(Protocol):
    def deliver(self, seq: int, payload: bytes) -> None: ...

    def notify(self, status: str, reason: str = "") -> None: ...


@dataclass
class CallbackSink:
    """Sink built from two callables; handy for tests and in-process peers."""

    on_frame: Callable[[int, bytes], None]
    on_status: Callable[[str, str], None] = lambda status, reason: None

    def deliver(self, seq: int, payload: bytes) -> None:
        self.on_frame(seq, payload)

    def notify(self, status: str, reason: str = "") -> None:
        self.on_status(status, reason)


@dataclass
class Frame:
    channel_id: str
    direction: Direction
    seq: int
    payload: bytes


@dataclass
class _Stream:
    """One direction of a channel."""

    last_seq: int = 0
    acked: int = 0
    delivered: int = 0
    buffer: deque = field(default_factory=deque)
    buffered_bytes: int = 0
    dropped: int = 0

    def reclaim(self, upto: int) -> None:
        while self.buffer and self.buffer[0][0] <= upto:
            _, payload = self.buffer.popleft()
            self.buffered_bytes -= len(payload)


@dataclass
class Attachment:
    side: Side
    sink: Sink
    token: int


@dataclass
class ChannelSession:
    channel_id: str
    task_id: str
    kind: ChannelKind
    capacity_frames: int = DEFAULT_CAPACITY_FRAMES
    capacity_bytes: int = DEFAULT_CAPACITY_BYTES
    status: ChannelStatus = ChannelStatus.OPEN

    def __post_init__(self) -> None:
        self.lock = threading.RLock()
        self.streams = {d: _Stream() for d in Direction}
        self.attached: dict[Side, Optional[Attachment]] = {Side.CLIENT: None, Side.TASK: None}

    @property
    def client_attached(self) -> bool:
        return self.attached[Side.CLIENT] is not None

    @property
    def task_attached(self) -> bool:
        return self.attached[Side.TASK] is not None

    def buffered(self, direction: Direction) -> list[int]:
        return [seq for seq, _ in self.streams[direction].buffer]

    def dropped(self, direction: Direction) -> int:
        return self.streams[direction].dropped

    def acked(self, direction: Direction) -> int:
        return self.streams[direction].acked

    def info(self) -> dict:
        return {
            "channel_id": self.channel_id,
            "task_id": self.task_id,
            "kind": self.kind.value,
            "status": self.status.value,
            "client_attached": self.client_attached,
            "task_attached": self.task_attached,
            "streams": {
                d.value: {
                    "last_seq": s.last_seq,
                    "acked": s.acked,
                    "buffered": len(s.buffer),
                    "dropped": s.dropped,
                }
                for d, s in self.streams.items()
            },
        }


class ChannelRelay:
    def __init__(
        self,
        capacity_frames: int = DEFAULT_CAPACITY_FRAMES,
        capacity_bytes: int = DEFAULT_CAPACITY_BYTES,
    ) -> None:
        self.capacity_frames = capacity_frames
        self.capacity_bytes = capacity_bytes
        self._lock = threading.Lock()
        self._channels: dict[str, ChannelSession] = {}
        self._tokens = itertools.count(1)

    # -- registry ------------------------------------------------------

    def get(self, channel_id: str) -> ChannelSession:
        with self._lock:
            ch = self._channels.get(channel_id)
        if ch is None:
            raise errors.UnknownChannel(f"unknown channel {channel_id}")
        return ch

    def channels_for_task(self, task_id: str) -> list[ChannelSession]:
        with self._lock:
            return [c for c in self._channels.values() if c.task_id == task_id]

    def find(self, task_id: str, kind: ChannelKind) -> Optional[ChannelSession]:
        for ch in self.channels_for_task(task_id):
            if ch.kind is kind:
                return ch
        return None

    def open_channel(
        self, task_id: str, kind: ChannelKind | str, channel_id: Optional[str] = None, reuse: bool = False
    ) -> str:
        """Create a session; task existence and state are checked by the caller.

        With ``reuse`` an existing healthy channel of the same kind is returned
        instead of raising ChannelExists.
        """
        kind = ChannelKind(kind)
        with self._lock:
            for ch in self._channels.values():
                if ch.task_id == task_id and ch.kind is kind:
                    if ch.status is ChannelStatus.FAILED:
                        continue
                    if reuse:
                        return ch.channel_id
                    raise errors.ChannelExists(f"task {task_id} already has a {kind.value} channel")
            for cid in [c.channel_id for c in self._channels.values()
                        if c.task_id == task_id and c.kind is kind]:
                del self._channels[cid]
            cid = channel_id or uuid.uuid4().hex[:16]
            self._channels[cid] = ChannelSession(cid, task_id, kind, self.capacity_frames, self.capacity_bytes)
        return cid

    # -- data path -----------------------------------------------------

    def _check_attached(self, ch: ChannelSession, side: Side, token: Optional[int]) -> Attachment:
        att = ch.attached[side]
        if att is None or (token is not None and att.token != token):
            raise errors.NotAttached(f"{side.value} side of channel {ch.channel_id} is not attached")
        return att

    def _check_open(self, ch: ChannelSession) -> None:
        if ch.status is ChannelStatus.FAILED:
            raise errors.BufferOverflow(f"channel {ch.channel_id} failed after a buffer overflow")

    def send(self, channel_id: str, side: Side | str, payload: bytes, token: Optional[int] = None) -> int:
        side = Side(side)
        ch = self.get(channel_id)
        with ch.lock:
            self._check_open(ch)
            self._check_attached(ch, side, token)
            if len(payload) > MAX_PAYLOAD:
                raise errors.PayloadTooLarge(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
            stream = ch.streams[outgoing(side)]
            receiver = ch.attached[side.other]
            if ch.kind is ChannelKind.DEBUG:
                if (
                    len(stream.buffer) >= ch.capacity_frames
                    or stream.buffered_bytes + len(payload) > ch.capacity_bytes
                ):
                    self._fail(ch, "buffer overflow")
                    raise errors.BufferOverflow(
                        f"channel {channel_id}: {len(stream.buffer)} unacked frames at capacity"
                    )
                stream.last_seq += 1
                seq = stream.last_seq
                stream.buffer.append((seq, payload))
                stream.buffered_bytes += len(payload)
                if receiver is not None:
                    stream.delivered = seq
                    receiver.sink.deliver(seq, payload)
                return seq
            stream.last_seq += 1
            seq = stream.last_seq
            if receiver is None:
                stream.dropped += 1
            else:
                stream.delivered = seq
                receiver.sink.deliver(seq, payload)
            return seq

    def attach(
        self, channel_id: str, side: Side | str, resume_from: int, sink: Sink
    ) -> tuple[int, int]:
        """Attach ``sink`` as ``side``; returns ``(token, sent_high)``.

        ``sent_high`` is the last seq the relay holds in this side's outgoing
        direction, so a sender can resume without gaps or duplicates.
        Buffered frames past ``resume_from`` are replayed into ``sink`` before
        this returns.
        """
        side = Side(side)
        ch = self.get(channel_id)
        with ch.lock:
            self._check_open(ch)
            inbound = ch.streams[incoming(side)]
            if ch.kind is ChannelKind.DEBUG:
                if resume_from < inbound.acked or resume_from > inbound.last_seq:
                    raise errors.InvalidAck(
                        f"resume_from {resume_from} outside [{inbound.acked}, {inbound.last_seq}]"
                    )
            old = ch.attached[side]
            if old is not None:
                # newest wins: a half-open connection must not block reconnection
                old.sink.notify("detached", "superseded")
            token = next(self._tokens)
            ch.attached[side] = Attachment(side, sink, token)
            if ch.kind is ChannelKind.DEBUG:
                inbound.acked = resume_from
                inbound.reclaim(resume_from)
                inbound.delivered = resume_from
                for seq, payload in list(inbound.buffer):
                    inbound.delivered = seq
                    sink.deliver(seq, payload)
            else:
                inbound.delivered = inbound.last_seq
            peer = ch.attached[side.other]
            if peer is not None:
                peer.sink.notify("peer_attached", side.value)
            return token, ch.streams[outgoing(side)].last_seq

    def detach(self, channel_id: str, side: Side | str, token: Optional[int] = None) -> None:
        side = Side(side)
        try:
            ch = self.get(channel_id)
        except errors.UnknownChannel:
            return
        with ch.lock:
            att = ch.attached[side]
            if att is None or (token is not None and att.token != token):
                return
            ch.attached[side] = None
            peer = ch.attached[side.other]
            if peer is not None:
                peer.sink.notify("peer_detached", side.value)

    def ack(self, channel_id: str, side: Side | str, seq: int, token: Optional[int] = None) -> None:
        side = Side(side)
        ch = self.get(channel_id)
        with ch.lock:
            self._check_attached(ch, side, token)
            stream = ch.streams[incoming(side)]
            if seq < stream.acked or seq > stream.delivered:
                raise errors.InvalidAck(f"ack {seq} outside [{stream.acked}, {stream.delivered}]")
            stream.acked = seq
            stream.reclaim(seq)

    def close_channel(self, channel_id: str, reason: str = "CLOSED") -> None:
        with self._lock:
            ch = self._channels.pop(channel_id, None)
        if ch is None:
            raise errors.UnknownChannel(f"unknown channel {channel_id}")
        with ch.lock:
            for att in ch.attached.values():
                if att is not None:
                    att.sink.notify("closed", reason)
            ch.attached = {Side.CLIENT: None, Side.TASK: None}
            for stream in ch.streams.values():
                stream.buffer.clear()
                stream.buffered_bytes = 0

    def close_task_channels(self, task_id: str, reason: str = "TASK_TERMINAL") -> list[str]:
        closed = []
        for ch in self.channels_for_task(task_id):
            try:
                self.close_channel(ch.channel_id, reason)
                closed.append(ch.channel_id)
            except errors.UnknownChannel:
                pass
        return closed

    def broadcast(self, task_id: str, status: str, reason: str = "") -> None:
        """Send a status notification to every attached side of a task's channels."""
        for ch in self.channels_for_task(task_id):
            with ch.lock:
                for att in ch.attached.values():
                    if att is not None:
                        att.sink.notify(status, reason)

    def _fail(self, ch: ChannelSession, reason: str) -> None:
        ch.status = ChannelStatus.FAILED
        log.warning("channel %s failed: %s", ch.channel_id, reason)
        for att in ch.attached.values():
            if att is not None:
                att.sink.notify("failed", reason)
