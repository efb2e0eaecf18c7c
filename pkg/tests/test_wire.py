from __future__ import annotations

import random
import socket
import struct
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from expd import canonical, errors
from expd.wire import (
    KNOWN_TYPES,
    MAX_BODY,
    Connection,
    MsgType,
    NeedMoreBytes,
    decode_frame,
    encode_frame,
    parse_address,
)


def reference_encode(msg_type: int, body: bytes) -> bytes:
    # independent byte-level writer
    out = bytearray()
    n = len(body) + 1
    out += bytes([(n >> 24) & 0xFF, (n >> 16) & 0xFF, (n >> 8) & 0xFF, n & 0xFF])
    out.append(msg_type)
    out += body
    return bytes(out)


def test_documented_layouts():
    assert encode_frame(0x01, b"{}") == bytes.fromhex("00000003017B7D")
    assert encode_frame(0x01, b"{}") == reference_encode(0x01, b"{}")
    assert encode_frame(0x01, canonical.dumpb({})) == bytes.fromhex("00000003017B7D")
    assert encode_frame(0x20, b"") == bytes.fromhex("0000000120")
    with pytest.raises(errors.PayloadTooLarge):
        encode_frame(0x20, b"\0" * (2 << 20))


def test_size_boundary():
    assert len(encode_frame(0x20, b"\0" * MAX_BODY)) == MAX_BODY + 5
    with pytest.raises(errors.PayloadTooLarge):
        encode_frame(0x20, b"\0" * (MAX_BODY + 1))


types = st.sampled_from(sorted(KNOWN_TYPES))


@given(types, st.binary(max_size=4096))
def test_round_trip(t, body):
    frame = encode_frame(t, body)
    assert frame == reference_encode(t, body)
    assert decode_frame(frame) == (t, body, len(frame))


@given(types, st.binary(max_size=256), st.binary(max_size=64))
def test_decode_consumes_one_frame(t, body, tail):
    frame = encode_frame(t, body)
    assert decode_frame(frame + tail)[2] == len(frame)


def test_partial_input():
    frame = encode_frame(0x01, b"{}")
    for cut in range(len(frame)):
        with pytest.raises(NeedMoreBytes):
            decode_frame(frame[:cut])
    with pytest.raises(errors.TruncatedStream):
        decode_frame(frame[:3], eof=True)


def test_declared_length_too_large():
    with pytest.raises(errors.FrameTooLarge):
        decode_frame(struct.pack("!IB", 2 << 20, 0x20))


def test_zero_length_and_unknown_type():
    with pytest.raises(errors.ProtocolError):
        decode_frame(b"\0\0\0\0")
    with pytest.raises(errors.ProtocolError):
        decode_frame(bytes.fromhex("00000001FF"))


def test_message_type_table():
    assert MsgType.HELLO == 0x01
    assert all(0x01 <= t <= 0x1F for t in MsgType if t not in (0x20, 0x21))
    assert (MsgType.CHANNEL_DATA_C2T, MsgType.CHANNEL_DATA_T2C) == (0x20, 0x21)


def test_ten_thousand_random_frames():
    rng = random.Random(7)
    known = sorted(KNOWN_TYPES)
    for _ in range(10_000):
        t = rng.choice(known)
        body = rng.randbytes(rng.choice([0, 1, rng.randint(0, 300), rng.randint(0, 5000)]))
        assert decode_frame(encode_frame(t, body))[:2] == (t, body)


def test_connection_streaming_and_eof():
    a, b = socket.socketpair()
    ca, cb = Connection(a), Connection(b)
    frames = [(0x20, bytes([i]) * i) for i in range(50)] + [(0x04, b"{}")]

    def writer():
        for t, body in frames:
            ca.send(t, body)
        ca.close()

    th = threading.Thread(target=writer)
    th.start()
    got = []
    while (f := cb.recv()) is not None:
        got.append(f)
    th.join()
    assert got == frames


def test_connection_truncated_stream():
    a, b = socket.socketpair()
    a.sendall(encode_frame(0x20, b"hello")[:6])
    a.close()
    with pytest.raises(errors.TruncatedStream):
        Connection(b).recv()


def test_parse_address():
    assert parse_address("127.0.0.1:7077") == ("127.0.0.1", 7077)
    with pytest.raises(errors.ValidationError):
        parse_address("nohost")
