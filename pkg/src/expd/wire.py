"""Length-prefixed framing for every daemon connection.

Layout: ``[length:4, big-endian][msg_type:1][body:length-1]``. ``length``
counts the type byte plus the body. Control bodies are canonical JSON; the
two channel-data types carry raw payload bytes.
"""

from __future__ import annotations

import socket
import struct
import threading
from enum import IntEnum
from typing import Any, Optional

from expd import canonical, errors

PROTOCOL_VERSION = 1
MAX_BODY = 1 << 20
MAX_LENGTH = MAX_BODY + 1
_HEADER = struct.Struct("!IB")


class MsgType(IntEnum):
    HELLO = 0x01
    REPLY = 0x02
    ERROR = 0x03
    EVENT = 0x04
    SUBMIT = 0x05
    STATUS = 0x06
    REGISTER = 0x07
    HEARTBEAT = 0x08
    CLAIM = 0x09
    REPORT = 0x0A
    LOG_APPEND = 0x0B
    LOG_SUBSCRIBE = 0x0C
    CHANNEL_OPEN = 0x0D
    CHANNEL_ATTACH = 0x0E
    CHANNEL_ACK = 0x0F
    CHANNEL_CLOSE = 0x10
    CANCEL = 0x11
    REPRODUCE = 0x12
    GC = 0x13
    WORKSPACE_RELEASED = 0x14
    CHANNEL_DATA_C2T = 0x20
    CHANNEL_DATA_T2C = 0x21


RAW_TYPES = frozenset({MsgType.CHANNEL_DATA_C2T, MsgType.CHANNEL_DATA_T2C})
KNOWN_TYPES = frozenset(int(t) for t in MsgType)


class NeedMoreBytes(Exception):
    """The buffer holds only part of a frame; nothing was consumed."""


def encode_frame(msg_type: int, body: bytes) -> bytes:
    if len(body) > MAX_BODY:
        raise errors.PayloadTooLarge(f"frame body of {len(body)} bytes exceeds {MAX_BODY}")
    if not 0 <= msg_type <= 0xFF:
        raise ValueError(f"msg_type {msg_type} does not fit in a byte")
    return _HEADER.pack(len(body) + 1, msg_type) + body


def decode_frame(data: bytes | bytearray | memoryview, eof: bool = False) -> tuple[int, bytes, int]:
    """Decode the first frame of ``data``; returns ``(msg_type, body, consumed)``.

    Raises NeedMoreBytes on a partial frame, or TruncatedStream instead when
    ``eof`` says no more bytes will come.
    """
    view = memoryview(data)
    if len(view) >= 4:
        (length,) = struct.unpack_from("!I", view, 0)
        if length > MAX_LENGTH:
            raise errors.FrameTooLarge(f"declared frame length {length} exceeds {MAX_LENGTH}")
        if length < 1:
            raise errors.ProtocolError("frame length must be at least 1")
        if len(view) >= 4 + length:
            msg_type = view[4]
            if msg_type not in KNOWN_TYPES:
                raise errors.ProtocolError(f"unknown msg_type 0x{msg_type:02x}")
            return msg_type, bytes(view[5:4 + length]), 4 + length
    if eof and len(view):
        raise errors.TruncatedStream(f"stream ended inside a frame ({len(view)} bytes pending)")
    raise NeedMoreBytes()


def encode_json(msg_type: int, obj: Any) -> bytes:
    return encode_frame(msg_type, canonical.dumpb(obj))


class Connection:
    """Framed duplex socket. Sends are serialized; one thread should receive."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self._send_lock = threading.Lock()
        self._buf = bytearray()
        self.closed = False

    @classmethod
    def connect(cls, address: str, timeout: float = 5.0) -> "Connection":
        host, port = parse_address(address)
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise errors.CoordinatorUnreachable(f"cannot reach coordinator at {address}: {exc}") from exc
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def send(self, msg_type: int, body: bytes) -> None:
        frame = encode_frame(msg_type, body)
        with self._send_lock:
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise errors.TransportError(f"send failed: {exc}") from exc

    def send_json(self, msg_type: int, obj: Any) -> None:
        self.send(msg_type, canonical.dumpb(obj))

    def recv(self) -> Optional[tuple[int, bytes]]:
        """Next frame, or None on a clean end of stream."""
        while True:
            try:
                msg_type, body, used = decode_frame(self._buf)
                del self._buf[:used]
                return msg_type, body
            except NeedMoreBytes:
                pass
            try:
                chunk = self.sock.recv(1 << 16)
            except OSError as exc:
                if self.closed:
                    return None
                raise errors.TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                if self._buf:
                    decode_frame(self._buf, eof=True)
                return None
            self._buf += chunk

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise errors.ValidationError(f"expected host:port, got {address!r}")
    return host, int(port)
