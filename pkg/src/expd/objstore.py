"""Multi-zone bucket/key object storage on local directory roots.

Layout::

    <root>/<zone>/<bucket>/objects/<percent-encoded-key>
    <root>/<zone>/_snapshots/blobs/<hex[0:2]>/<hex>
    <root>/<zone>/_snapshots/manifests/<snapshot-id>.json

The ``_snapshots`` bucket is reserved for the snapshot store; its keys are
``blobs/<hex>`` and ``manifests/<id>.json``. Zone-to-zone copies go through
:meth:`ObjectStore.replicate`, which books every byte that crossed a link in
the transfer ledger.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator
from urllib.parse import quote, unquote

from expd import canonical, errors

SNAPSHOT_BUCKET = "_snapshots"


def encode_key(key: str) -> str:
    encoded = quote(key, safe="")
    # "." and ".." are unreserved but name directory entries on disk
    if set(encoded) == {"."}:
        encoded = "%2E" * len(encoded)
    return encoded


def decode_key(name: str) -> str:
    return unquote(name)


def check_key(key: str) -> None:
    if not isinstance(key, str) or not key:
        raise errors.InvalidKey("object keys must be non-empty strings")
    if "\0" in key:
        raise errors.InvalidKey("object keys must not contain NUL")


def check_bucket(bucket: str, allow_reserved: bool = False) -> None:
    if not bucket or "/" in bucket or "\0" in bucket or bucket in (".", ".."):
        raise errors.InvalidKey(f"invalid bucket name {bucket!r}")
    if bucket.startswith("_") and not (allow_reserved and bucket == SNAPSHOT_BUCKET):
        raise errors.InvalidKey(f"bucket names starting with '_' are reserved: {bucket!r}")


def check_zone(zone: str) -> None:
    if not zone or "/" in zone or zone.startswith(".") or "\0" in zone:
        raise errors.InvalidKey(f"invalid zone name {zone!r}")


@dataclass(frozen=True)
class ObjectRef:
    zone: str
    bucket: str
    key: str
    size: int
    digest: str


@dataclass
class TransferReport:
    from_zone: str
    to_zone: str
    bucket: str
    transferred: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    bytes_transferred: int = 0

    def merge(self, other: "TransferReport") -> None:
        self.transferred.extend(other.transferred)
        self.skipped.extend(other.skipped)
        self.bytes_transferred += other.bytes_transferred

    def to_dict(self) -> dict:
        return {
            "from_zone": self.from_zone,
            "to_zone": self.to_zone,
            "bucket": self.bucket,
            "transferred": list(self.transferred),
            "skipped": list(self.skipped),
            "bytes_transferred": self.bytes_transferred,
        }

    def to_json(self) -> str:
        return canonical.dumps(self.to_dict())


class TransferLedger:
    """Monotone per-link counters of bytes and objects that crossed zones."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._bytes: dict[tuple[str, str], int] = defaultdict(int)
        self._objects: dict[tuple[str, str], int] = defaultdict(int)

    def record(self, from_zone: str, to_zone: str, nbytes: int, nobjects: int) -> None:
        if nbytes < 0 or nobjects < 0:
            raise ValueError("ledger counters only grow")
        with self._lock:
            self._bytes[(from_zone, to_zone)] += nbytes
            self._objects[(from_zone, to_zone)] += nobjects

    def bytes_transferred(self, from_zone: str, to_zone: str) -> int:
        with self._lock:
            return self._bytes.get((from_zone, to_zone), 0)

    def objects_transferred(self, from_zone: str, to_zone: str) -> int:
        with self._lock:
            return self._objects.get((from_zone, to_zone), 0)

    def to_dict(self) -> dict:
        with self._lock:
            return {
                f"{a}->{b}": {"bytes_transferred": n, "objects_transferred": self._objects[(a, b)]}
                for (a, b), n in sorted(self._bytes.items())
            }


class ObjectStore:
    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.ledger = TransferLedger()

    # -- paths ---------------------------------------------------------

    def zone_root(self, zone: str) -> Path:
        check_zone(zone)
        return self.root / zone

    def object_path(self, zone: str, bucket: str, key: str) -> Path:
        check_key(key)
        check_bucket(bucket, allow_reserved=True)
        base = self.zone_root(zone) / bucket
        if bucket == SNAPSHOT_BUCKET:
            return base / _snapshot_rel(key)
        return base / "objects" / encode_key(key)

    def zones(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if p.is_dir() and not p.name.startswith("."))

    # -- object operations ---------------------------------------------

    def put_object(self, zone: str, bucket: str, key: str, data: bytes) -> ObjectRef:
        check_bucket(bucket, allow_reserved=True)
        path = self.object_path(zone, bucket, key)
        atomic_write(path, data, tmp_dir=self.zone_root(zone) / ".tmp")
        return ObjectRef(zone, bucket, key, len(data), hashlib.sha256(data).hexdigest())

    def get_object(self, zone: str, bucket: str, key: str) -> bytes:
        path = self.object_path(zone, bucket, key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise errors.NotFound(f"{zone}:{bucket}/{key} not found") from None
        except IsADirectoryError:
            raise errors.NotFound(f"{zone}:{bucket}/{key} not found") from None
        except OSError as exc:
            raise errors.StorageFailure(str(exc)) from exc

    def has_object(self, zone: str, bucket: str, key: str) -> bool:
        return self.object_path(zone, bucket, key).is_file()

    def object_digest(self, zone: str, bucket: str, key: str) -> str | None:
        path = self.object_path(zone, bucket, key)
        try:
            return file_sha256(path)
        except FileNotFoundError:
            return None

    def delete_object(self, zone: str, bucket: str, key: str) -> bool:
        path = self.object_path(zone, bucket, key)
        try:
            path.unlink()
            return True
        except FileNotFoundError:
            return False
        except OSError as exc:
            raise errors.StorageFailure(str(exc)) from exc

    def list_prefix(self, zone: str, bucket: str, prefix: str = "") -> list[str]:
        check_bucket(bucket, allow_reserved=True)
        base = self.zone_root(zone) / bucket
        if bucket == SNAPSHOT_BUCKET:
            keys = list(_iter_snapshot_keys(base))
        else:
            objdir = base / "objects"
            if not objdir.is_dir():
                return []
            keys = [decode_key(p.name) for p in objdir.iterdir() if p.is_file()]
        return sorted(k for k in keys if k.startswith(prefix))

    def replicate(self, from_zone: str, to_zone: str, bucket: str, keys: Iterable[str]) -> TransferReport:
        """Copy ``keys`` to ``to_zone``, sending only missing or differing objects.

        Source keys are all checked before anything is written, so a missing
        key leaves the target zone untouched.
        """
        keys = list(dict.fromkeys(keys))
        report = TransferReport(from_zone, to_zone, bucket)
        sources = {}
        for key in keys:
            src = self.object_path(from_zone, bucket, key)
            if not src.is_file():
                raise errors.NotFound(f"{from_zone}:{bucket}/{key} not found")
            sources[key] = src
        if from_zone == to_zone:
            report.skipped.extend(keys)
            return report
        for key in keys:
            src = sources[key]
            dst = self.object_path(to_zone, bucket, key)
            src_digest = file_sha256(src)
            if dst.is_file() and file_sha256(dst) == src_digest:
                report.skipped.append(key)
                continue
            data = src.read_bytes()
            atomic_write(dst, data, tmp_dir=self.zone_root(to_zone) / ".tmp")
            report.transferred.append(key)
            report.bytes_transferred += len(data)
        self.ledger.record(from_zone, to_zone, report.bytes_transferred, len(report.transferred))
        return report


def _snapshot_rel(key: str) -> Path:
    if key.startswith("blobs/"):
        hexd = key[len("blobs/"):]
        if len(hexd) != 64 or any(c not in "0123456789abcdef" for c in hexd):
            raise errors.InvalidKey(f"bad blob key {key!r}")
        return Path("blobs") / hexd[:2] / hexd
    if key.startswith("manifests/") and key.endswith(".json"):
        name = key[len("manifests/"):-len(".json")]
        if len(name) != 64 or any(c not in "0123456789abcdef" for c in name):
            raise errors.InvalidKey(f"bad manifest key {key!r}")
        return Path("manifests") / f"{name}.json"
    raise errors.InvalidKey(f"bad snapshot-store key {key!r}")


def _iter_snapshot_keys(base: Path) -> Iterator[str]:
    blobs = base / "blobs"
    if blobs.is_dir():
        for fan in blobs.iterdir():
            if fan.is_dir():
                for p in fan.iterdir():
                    if p.is_file():
                        yield f"blobs/{p.name}"
    manifests = base / "manifests"
    if manifests.is_dir():
        for p in manifests.iterdir():
            if p.is_file() and p.suffix == ".json":
                yield f"manifests/{p.name}"


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path: Path, data: bytes, tmp_dir: Path | None = None) -> None:
    """Write-temp-then-rename so readers see the old or the new content."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_dir = tmp_dir or path.parent
        tmp_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=tmp_dir, prefix=".put-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise
    except OSError as exc:
        raise errors.StorageFailure(f"cannot write {path}: {exc}") from exc
