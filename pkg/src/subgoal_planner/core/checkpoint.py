"""Atomic file writes and checksummed checkpoint bundles.

A bundle is a zip archive with one entry per stored blob plus a
``manifest.json`` that records each entry's SHA-256 and free-form metadata
(configs, schedule parameters, the world-model checksum).
"""

import hashlib
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import CheckpointCorruptError, ChecksumError, IncompatibleCheckpointError

MANIFEST = "manifest.json"
BUNDLE_VERSION = 1


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> Path:
    """Write ``data`` to ``path`` via a temp file and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


@dataclass
class Bundle:
    """In-memory view of a checkpoint archive."""

    entries: dict[str, bytes] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def wm_checksum(self) -> str | None:
        return self.meta.get("wm_checksum")

    def to_bytes(self) -> bytes:
        manifest = {
            "version": BUNDLE_VERSION,
            "checksums": {name: sha256_hex(blob) for name, blob in sorted(self.entries.items())},
            "meta": self.meta,
        }
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for name in sorted(self.entries):
                # fixed timestamp keeps archives byte-reproducible
                info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, self.entries[name], compress_type=zipfile.ZIP_DEFLATED)
            info = zipfile.ZipInfo(MANIFEST, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=2),
                        compress_type=zipfile.ZIP_DEFLATED)
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        return atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bundle":
        try:
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                manifest = json.loads(zf.read(MANIFEST))
                entries = {
                    name: zf.read(name) for name in zf.namelist() if name != MANIFEST
                }
        except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
            raise CheckpointCorruptError(f"unreadable checkpoint bundle: {e}") from e

        checksums = manifest.get("checksums", {})
        if set(checksums) != set(entries):
            raise CheckpointCorruptError("bundle entries do not match manifest")
        for name, blob in entries.items():
            if sha256_hex(blob) != checksums[name]:
                raise ChecksumError(f"checksum mismatch for bundle entry '{name}'")
        return cls(entries=entries, meta=manifest.get("meta", {}))

    @classmethod
    def load(cls, path: str | Path) -> "Bundle":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


def require_same_world_model(*checksums: str | None, what: str = "components") -> str:
    """Return the shared world-model checksum or raise if they differ."""
    present = {c for c in checksums if c is not None}
    if len(present) != 1:
        raise IncompatibleCheckpointError(
            f"{what} were built on different world models: {sorted(present) or 'none recorded'}"
        )
    return present.pop()
