from __future__ import annotations

import hashlib
import os
import threading

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from expd import errors
from expd.objstore import ObjectStore, decode_key, encode_key


def test_empty_object(objects):
    objects.put_object("z1", "data", "a", b"")
    assert objects.get_object("z1", "data", "a") == b""


def test_one_mib_round_trip(objects):
    data = os.urandom(1 << 20)
    objects.put_object("z1", "data", "big", data)
    got = objects.get_object("z1", "data", "big")
    assert hashlib.sha256(got).hexdigest() == hashlib.sha256(data).hexdigest()


def test_last_writer_wins(objects):
    objects.put_object("z1", "data", "a", b"X")
    objects.put_object("z1", "data", "a", b"Y")
    assert objects.get_object("z1", "data", "a") == b"Y"


def test_get_missing_and_deleted(objects):
    with pytest.raises(errors.NotFound):
        objects.get_object("z1", "data", "nope")
    with pytest.raises(errors.NotFound):
        objects.get_object("z1", "nobucket", "a")
    objects.put_object("z1", "data", "a", b"1")
    assert objects.delete_object("z1", "data", "a")
    with pytest.raises(errors.NotFound):
        objects.get_object("z1", "data", "a")


def test_list_prefix(objects):
    for k in ["b/1", "a/2", "a/1"]:
        objects.put_object("z", "data", k, b"x")
    assert objects.list_prefix("z", "data", "a/") == ["a/1", "a/2"]
    assert objects.list_prefix("z", "data", "") == ["a/1", "a/2", "b/1"]
    assert objects.list_prefix("z", "data", "zz") == []
    assert objects.list_prefix("z", "absent", "") == []


@pytest.mark.parametrize("key", ["", "a\x00b"])
def test_invalid_keys(objects, key):
    with pytest.raises(errors.InvalidKey):
        objects.put_object("z", "data", key, b"")


def test_key_layout_on_disk(objects):
    objects.put_object("z", "data", "v1/x y.csv", b"1")
    p = objects.root / "z" / "data" / "objects" / "v1%2Fx%20y.csv"
    assert p.read_bytes() == b"1"
    assert encode_key("a-b_c.d~e") == "a-b_c.d~e"
    assert encode_key("..") != ".." and decode_key(encode_key("..")) == ".."


@given(st.text(min_size=1).filter(lambda s: "\x00" not in s))
def test_key_encoding_round_trip(key):
    name = encode_key(key)
    assert "/" not in name and name not in (".", "..")
    assert decode_key(name) == key


@settings(max_examples=60, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(key=st.text(min_size=1, max_size=40).filter(lambda s: "\x00" not in s), data=st.binary(max_size=2048),
       zone=st.sampled_from(["z1", "eu", "us-west"]))
def test_put_get_round_trip(objects, key, data, zone):
    objects.put_object(zone, "b", key, data)
    assert objects.get_object(zone, "b", key) == data
    assert key in objects.list_prefix(zone, "b", "")


def test_replicate_fresh_then_idempotent(objects):
    blobs = {"k1": b"a" * 10, "k2": b"b" * 300, "k3": os.urandom(5000)}
    for k, v in blobs.items():
        objects.put_object("A", "data", k, v)
    before = objects.ledger.bytes_transferred("A", "B")
    rep = objects.replicate("A", "B", "data", list(blobs))
    expected = sum(len(v) for v in blobs.values())
    assert sorted(rep.transferred) == sorted(blobs) and rep.skipped == []
    assert rep.bytes_transferred == expected
    assert objects.ledger.bytes_transferred("A", "B") - before == expected
    assert objects.ledger.objects_transferred("A", "B") == 3
    for k in blobs:
        assert objects.object_digest("A", "data", k) == objects.object_digest("B", "data", k)
    again = objects.replicate("A", "B", "data", list(blobs))
    assert again.transferred == [] and sorted(again.skipped) == sorted(blobs)
    assert objects.ledger.bytes_transferred("A", "B") == expected


def test_replicate_resends_changed_digest(objects):
    objects.put_object("A", "d", "k", b"new")
    objects.put_object("B", "d", "k", b"old")
    rep = objects.replicate("A", "B", "d", ["k"])
    assert rep.transferred == ["k"] and objects.get_object("B", "d", "k") == b"new"


def test_replicate_missing_source_changes_nothing(objects):
    objects.put_object("A", "data", "k1", b"1")
    with pytest.raises(errors.NotFound):
        objects.replicate("A", "B", "data", ["k1", "missing"])
    assert objects.list_prefix("B", "data", "") == []
    assert objects.ledger.bytes_transferred("A", "B") == 0


def test_transfer_report_json_is_canonical(objects):
    objects.put_object("A", "d", "k", b"xy")
    js = objects.replicate("A", "B", "d", ["k"]).to_json()
    assert " " not in js and js.startswith("{")


def test_concurrent_readers_see_old_or_new(objects):
    old, new = b"o" * 200_000, b"n" * 200_000
    objects.put_object("z", "d", "k", old)
    torn: list[bytes] = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            data = objects.get_object("z", "d", "k")
            if data not in (old, new):
                torn.append(data)

    t = threading.Thread(target=reader)
    t.start()
    for i in range(30):
        objects.put_object("z", "d", "k", new if i % 2 == 0 else old)
    stop.set()
    t.join()
    assert torn == []


def test_reserved_bucket_names(objects):
    with pytest.raises(errors.ValidationError):
        objects.put_object("z", "_private", "k", b"")
