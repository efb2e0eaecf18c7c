"""Content-addressed workspace snapshots.

A snapshot is a manifest (sorted file entries plus an optional parent id)
whose canonical JSON, minus ``created_at``, hashes to the snapshot id. File
contents are whole-file blobs keyed by SHA-256, so uploading against a parent
only sends blobs the zone does not already hold.
"""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import os
import stat
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import pathspec

from expd import canonical, errors
from expd.objstore import SNAPSHOT_BUCKET, ObjectStore, TransferReport

IGNORE_FILE = ".jtignore"
ALWAYS_IGNORED = (".jt/",)

FILE = "FILE"
SYMLINK = "SYMLINK"


def hash_blob(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def blob_key(digest: str) -> str:
    return f"blobs/{digest}"


def manifest_key(snapshot_id: str) -> str:
    return f"manifests/{snapshot_id}.json"


@dataclass(frozen=True)
class FileEntry:
    path: str
    kind: str
    digest: Optional[str] = None
    size: Optional[int] = None
    executable: Optional[bool] = None
    link_target: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "kind": self.kind,
            "digest": self.digest,
            "size": self.size,
            "executable": self.executable,
            "link_target": self.link_target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FileEntry":
        return cls(d["path"], d["kind"], d.get("digest"), d.get("size"), d.get("executable"), d.get("link_target"))

    def signature(self) -> tuple:
        return (self.kind, self.digest, self.executable, self.link_target)


def _path_key(path: str) -> bytes:
    return path.encode("utf-8", "surrogateescape")


@dataclass(frozen=True)
class SnapshotManifest:
    entries: tuple[FileEntry, ...]
    parent: Optional[str] = None
    created_at: float = 0.0

    def identity_dict(self) -> dict:
        return {"entries": [e.to_dict() for e in self.entries], "parent": self.parent}

    @property
    def snapshot_id(self) -> str:
        return canonical.digest(self.identity_dict())

    def to_dict(self) -> dict:
        d = self.identity_dict()
        d["created_at"] = self.created_at
        return d

    def to_json(self) -> bytes:
        return canonical.dumpb(self.to_dict())

    @classmethod
    def from_json(cls, data: bytes) -> "SnapshotManifest":
        d = canonical.loads(data)
        return cls(tuple(FileEntry.from_dict(e) for e in d["entries"]), d.get("parent"), d.get("created_at", 0.0))

    def by_path(self) -> dict[str, FileEntry]:
        return {e.path: e for e in self.entries}

    def digests(self) -> set[str]:
        return {e.digest for e in self.entries if e.kind == FILE and e.digest}


@dataclass(frozen=True)
class DeltaSet:
    added: tuple[str, ...] = ()
    modified: tuple[str, ...] = ()
    removed: tuple[str, ...] = ()

    @property
    def empty(self) -> bool:
        return not (self.added or self.modified or self.removed)


@dataclass
class UploadReport:
    snapshot_id: str
    zone: str
    blobs_transferred: int = 0
    blobs_skipped: int = 0
    blob_bytes: int = 0
    manifest_bytes: int = 0

    @property
    def bytes_transferred(self) -> int:
        return self.blob_bytes + self.manifest_bytes

    def to_dict(self) -> dict:
        return {
            "snapshot_id": self.snapshot_id,
            "zone": self.zone,
            "blobs_transferred": self.blobs_transferred,
            "blobs_skipped": self.blobs_skipped,
            "blob_bytes": self.blob_bytes,
            "manifest_bytes": self.manifest_bytes,
            "bytes_transferred": self.bytes_transferred,
        }


@dataclass
class GcReport:
    zone: str
    manifests_deleted: int = 0
    blobs_deleted: int = 0
    bytes_freed: int = 0
    deleted: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "zone": self.zone,
            "manifests_deleted": self.manifests_deleted,
            "blobs_deleted": self.blobs_deleted,
            "bytes_freed": self.bytes_freed,
        }


# -- scanning ----------------------------------------------------------------

def load_ignore_rules(workspace: Path) -> list[str]:
    path = workspace / IGNORE_FILE
    if not path.is_file():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()
    return [ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def scan_workspace(directory: str | os.PathLike, ignore_rules: Optional[Sequence[str]] = None) -> list[FileEntry]:
    """List regular files and symlinks under ``directory``, sorted by path bytes.

    ``ignore_rules`` defaults to the workspace's ``.jtignore``. Symlinks are
    recorded by target and never followed.
    """
    root = Path(directory)
    if not root.is_dir():
        raise errors.NotADirectory(f"{root} is not a directory")
    rules = load_ignore_rules(root) if ignore_rules is None else list(ignore_rules)
    spec = pathspec.GitIgnoreSpec.from_lines([*ALWAYS_IGNORED, *rules])
    entries: list[FileEntry] = []

    def walk(dirpath: Path, rel: str) -> None:
        with os.scandir(dirpath) as it:
            children = sorted(it, key=lambda e: _path_key(e.name))
        for child in children:
            relpath = f"{rel}{child.name}"
            st = child.stat(follow_symlinks=False)
            mode = st.st_mode
            if stat.S_ISDIR(mode):
                if spec.match_file(relpath + "/"):
                    continue
                walk(Path(child.path), relpath + "/")
                continue
            if spec.match_file(relpath):
                continue
            if stat.S_ISLNK(mode):
                entries.append(FileEntry(relpath, SYMLINK, link_target=os.readlink(child.path)))
            elif stat.S_ISREG(mode):
                digest, size = _hash_file(child.path)
                entries.append(FileEntry(relpath, FILE, digest, size, bool(mode & stat.S_IXUSR)))
            else:
                raise errors.UnsupportedFileType(f"{relpath}: unsupported file type (mode {oct(mode)})")

    walk(root, "")
    entries.sort(key=lambda e: _path_key(e.path))
    return entries


def _hash_file(path: str) -> tuple[str, int]:
    h = hashlib.sha256()
    size = 0
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
            size += len(block)
    return h.hexdigest(), size


def build_manifest(
    listing: Iterable[FileEntry], parent: Optional[str] = None, created_at: Optional[float] = None
) -> SnapshotManifest:
    entries = sorted(listing, key=lambda e: _path_key(e.path))
    for a, b in zip(entries, entries[1:]):
        if a.path == b.path:
            raise errors.DuplicatePath(f"duplicate path {a.path!r}")
    return SnapshotManifest(tuple(entries), parent, time.time() if created_at is None else created_at)


def diff_manifests(parent: SnapshotManifest, child: SnapshotManifest) -> DeltaSet:
    old = parent.by_path()
    new = child.by_path()
    added = tuple(p for p in new if p not in old)
    removed = tuple(p for p in old if p not in new)
    modified = tuple(p for p in new if p in old and new[p].signature() != old[p].signature())
    return DeltaSet(added, modified, removed)


# -- store -------------------------------------------------------------------

class SnapshotStore:
    def __init__(self, objects: ObjectStore) -> None:
        self.objects = objects

    @contextlib.contextmanager
    def zone_lock(self, zone: str, exclusive: bool = False) -> Iterator[None]:
        """Uploads hold the zone lock shared; garbage collection holds it exclusively."""
        lock_path = self.objects.zone_root(zone) / ".lock"
        lock_path.parent.mkdir(parents=True, exist_ok=True)
        with open(lock_path, "a+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX if exclusive else fcntl.LOCK_SH)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def has_snapshot(self, zone: str, snapshot_id: str) -> bool:
        return self.objects.has_object(zone, SNAPSHOT_BUCKET, manifest_key(snapshot_id))

    def has_blob(self, zone: str, digest: str) -> bool:
        return self.objects.has_object(zone, SNAPSHOT_BUCKET, blob_key(digest))

    def load_manifest(self, zone: str, snapshot_id: str) -> SnapshotManifest:
        try:
            data = self.objects.get_object(zone, SNAPSHOT_BUCKET, manifest_key(snapshot_id))
        except (errors.NotFound, errors.InvalidKey):
            raise errors.SnapshotNotFound(f"snapshot {snapshot_id} not found in zone {zone}") from None
        return SnapshotManifest.from_json(data)

    def list_snapshots(self, zone: str) -> list[str]:
        keys = self.objects.list_prefix(zone, SNAPSHOT_BUCKET, "manifests/")
        return [k[len("manifests/"):-len(".json")] for k in keys]

    def list_blobs(self, zone: str) -> list[str]:
        return [k[len("blobs/"):] for k in self.objects.list_prefix(zone, SNAPSHOT_BUCKET, "blobs/")]

    def upload_snapshot(
        self,
        workspace_dir: str | os.PathLike,
        parent: Optional[str],
        zone: str,
        ignore_rules: Optional[Sequence[str]] = None,
    ) -> tuple[str, UploadReport]:
        workspace = Path(workspace_dir)
        with self.zone_lock(zone):
            if parent is not None and not self.has_snapshot(zone, parent):
                raise errors.ParentNotFound(f"parent snapshot {parent} not found in zone {zone}")
            listing = scan_workspace(workspace, ignore_rules)
            manifest = build_manifest(listing, parent)
            sid = manifest.snapshot_id
            report = UploadReport(sid, zone)
            sent: set[str] = set()
            for entry in manifest.entries:
                if entry.kind != FILE:
                    continue
                assert entry.digest is not None
                if entry.digest in sent or self.has_blob(zone, entry.digest):
                    report.blobs_skipped += 1
                    continue
                data = (workspace / entry.path).read_bytes()
                if hash_blob(data) != entry.digest:
                    raise errors.StorageFailure(f"{entry.path} changed while uploading")
                self.objects.put_object(zone, SNAPSHOT_BUCKET, blob_key(entry.digest), data)
                sent.add(entry.digest)
                report.blobs_transferred += 1
                report.blob_bytes += len(data)
            # Manifest last: a visible manifest implies its blobs are present.
            if not self.has_snapshot(zone, sid):
                body = manifest.to_json()
                self.objects.put_object(zone, SNAPSHOT_BUCKET, manifest_key(sid), body)
                report.manifest_bytes = len(body)
        return sid, report

    def materialize(self, snapshot_id: str, dest_dir: str | os.PathLike, zone: str) -> SnapshotManifest:
        dest = Path(dest_dir)
        if dest.exists():
            if not dest.is_dir() or any(dest.iterdir()):
                raise errors.DestinationNotEmpty(f"{dest} is not an empty directory")
        manifest = self.load_manifest(zone, snapshot_id)
        for entry in manifest.entries:
            if entry.kind == FILE and not self.has_blob(zone, entry.digest or ""):
                raise errors.MissingBlob(f"blob {entry.digest} for {entry.path} missing in zone {zone}")
        dest.mkdir(parents=True, exist_ok=True)
        for entry in manifest.entries:
            target = dest / entry.path
            target.parent.mkdir(parents=True, exist_ok=True)
            if entry.kind == SYMLINK:
                os.symlink(entry.link_target or "", target)
                continue
            data = self.objects.get_object(zone, SNAPSHOT_BUCKET, blob_key(entry.digest or ""))
            if hash_blob(data) != entry.digest:
                raise errors.StorageFailure(f"blob {entry.digest} is corrupt")
            target.write_bytes(data)
            os.chmod(target, 0o755 if entry.executable else 0o644)
        return manifest

    def replicate_snapshot(self, snapshot_id: str, from_zone: str, to_zone: str) -> TransferReport:
        manifest = self.load_manifest(from_zone, snapshot_id)
        digests = sorted(manifest.digests())
        for d in digests:
            if not self.has_blob(from_zone, d):
                raise errors.MissingBlob(f"blob {d} missing in zone {from_zone}")
        report = self.objects.replicate(from_zone, to_zone, SNAPSHOT_BUCKET, [blob_key(d) for d in digests])
        report.merge(self.objects.replicate(from_zone, to_zone, SNAPSHOT_BUCKET, [manifest_key(snapshot_id)]))
        return report

    def reachable(self, zone: str, live_roots: Iterable[str]) -> tuple[set[str], set[str]]:
        manifests: set[str] = set()
        blobs: set[str] = set()
        stack = list(live_roots)
        while stack:
            sid = stack.pop()
            if sid in manifests:
                continue
            try:
                manifest = self.load_manifest(zone, sid)
            except errors.SnapshotNotFound:
                continue
            manifests.add(sid)
            blobs |= manifest.digests()
            if manifest.parent:
                stack.append(manifest.parent)
        return manifests, blobs

    def collect_garbage(self, zone: str, live_roots: Iterable[str]) -> GcReport:
        report = GcReport(zone)
        with self.zone_lock(zone, exclusive=True):
            live_manifests, live_blobs = self.reachable(zone, live_roots)
            for sid in self.list_snapshots(zone):
                if sid not in live_manifests:
                    self._delete(zone, manifest_key(sid), report)
                    report.manifests_deleted += 1
            for digest in self.list_blobs(zone):
                if digest not in live_blobs:
                    self._delete(zone, blob_key(digest), report)
                    report.blobs_deleted += 1
        return report

    def _delete(self, zone: str, key: str, report: GcReport) -> None:
        path = self.objects.object_path(zone, SNAPSHOT_BUCKET, key)
        try:
            report.bytes_freed += path.stat().st_size
        except FileNotFoundError:
            return
        self.objects.delete_object(zone, SNAPSHOT_BUCKET, key)
        report.deleted.append(key)


def tree_signature(directory: str | os.PathLike) -> list[tuple]:
    """Comparable description of a tree: path, kind, content, exec bit, link target."""
    out = []
    for entry in scan_workspace(directory, ignore_rules=[]):
        out.append((entry.path, entry.kind, entry.digest, entry.executable, entry.link_target))
    return out
