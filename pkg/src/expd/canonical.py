"""Canonical JSON: sorted keys, no insignificant whitespace, UTF-8."""

from __future__ import annotations

import hashlib
import json
from typing import Any


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def dumpb(obj: Any) -> bytes:
    return dumps(obj).encode("utf-8")


def loads(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(data)


def digest(obj: Any) -> str:
    return hashlib.sha256(dumpb(obj)).hexdigest()
