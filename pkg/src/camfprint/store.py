"""Single-file signature database.

Layout (little-endian)::

    header   magic b"SIGS" | version u32 | count u64
    records  count x { sig_id u64 | extractor hash 32 bytes |
                       device_id 64 bytes UTF-8, zero padded |
                       path offset u64 | path length u32 | 1024 x f32 }
    strings  UTF-8 image paths, addressed by (offset, length)

Writes go to a temporary file that atomically replaces the store, so a reader
opening the path always sees a complete file.
"""
from __future__ import annotations

import contextlib
import os
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .validation import SIGNATURE_DIM

MAGIC = b"SIGS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIQ")
RECORD = np.dtype(
    [
        ("sig_id", "<u8"),
        ("hash", "V32"),
        ("device_id", "S64"),
        ("path_offset", "<u8"),
        ("path_length", "<u4"),
        ("values", "<f4", (SIGNATURE_DIM,)),
    ]
)


class StoreError(ValueError):
    pass


class StoreConflict(StoreError):
    """Same (image, extractor) key stored with different values."""


@dataclass
class StoreRecord:
    image_path: str
    device_id: str
    extractor_version: str
    values: np.ndarray = field(repr=False)
    sig_id: Optional[int] = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != (SIGNATURE_DIM,):
            raise StoreError(f"expected {SIGNATURE_DIM} values, got shape {v.shape}")
        v = v.astype("<f4", copy=False)
        if not np.all(np.isfinite(v)):
            raise StoreError("signature values must be finite")
        self.values = v
        if len(self.device_id.encode("utf-8")) > 64 or not self.device_id:
            raise StoreError(f"device_id {self.device_id!r} must be 1-64 UTF-8 bytes")
        try:
            raw = bytes.fromhex(self.extractor_version)
        except ValueError:
            raw = b""
        if len(raw) != 32:
            raise StoreError("extractor_version must be a 64-character hex digest")


class SignatureStore:
    """Embedded signature database backed by one file."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.RLock()
        self._batch_depth = 0
        self._dirty = False
        self._reset()
        if self.path.exists():
            self._load()

    def _reset(self):
        self._paths: List[str] = []
        self._devices: List[str] = []
        self._versions: List[str] = []
        self._values: List[np.ndarray] = []
        self._key: Dict[Tuple[str, str], int] = {}
        self._by_device: Dict[str, List[int]] = {}

    # -- io ---------------------------------------------------------------

    def _load(self):
        raw = self.path.read_bytes()
        if len(raw) < HEADER.size:
            raise StoreError(f"{self.path}: truncated header")
        magic, version, count = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise StoreError(f"{self.path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise StoreError(f"{self.path}: unsupported version {version}")
        end = HEADER.size + count * RECORD.itemsize
        if len(raw) < end:
            raise StoreError(f"{self.path}: truncated records")
        recs = np.frombuffer(raw, RECORD, count=count, offset=HEADER.size)
        strings = raw[end:]
        self._reset()
        for i, r in enumerate(recs):
            if int(r["sig_id"]) != i:
                raise StoreError(f"{self.path}: record {i} has sig_id {int(r['sig_id'])}")
            off, n = int(r["path_offset"]), int(r["path_length"])
            if off + n > len(strings):
                raise StoreError(f"{self.path}: path of record {i} outside string table")
            self._append(
                strings[off : off + n].decode("utf-8"),
                r["device_id"].decode("utf-8"),
                bytes(r["hash"]).hex(),
                r["values"].copy(),
            )

    def to_bytes(self) -> bytes:
        with self._lock:
            n = len(self._paths)
            recs = np.zeros(n, RECORD)
            encoded = [p.encode("utf-8") for p in self._paths]
            offsets = np.cumsum([0] + [len(e) for e in encoded])[:-1] if n else []
            recs["sig_id"] = np.arange(n, dtype=np.uint64)
            recs["device_id"] = [d.encode("utf-8") for d in self._devices]
            recs["path_offset"] = offsets
            recs["path_length"] = [len(e) for e in encoded]
            if n:
                recs["values"] = np.stack(self._values)
                hashes = np.frombuffer(
                    b"".join(bytes.fromhex(v) for v in self._versions), dtype="V32"
                )
                recs["hash"] = hashes
            return HEADER.pack(MAGIC, FORMAT_VERSION, n) + recs.tobytes() + b"".join(encoded)

    def commit(self) -> None:
        with self._lock:
            payload = self.to_bytes()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=".sigs-", dir=self.path.parent)
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(payload)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.path)
            except BaseException:
                with contextlib.suppress(FileNotFoundError):
                    os.unlink(tmp)
                raise
            self._dirty = False

    @contextlib.contextmanager
    def batch(self):
        """Defer the file rewrite until the outermost ``batch`` exits."""
        with self._lock:
            self._batch_depth += 1
            try:
                yield self
            finally:
                self._batch_depth -= 1
                if self._batch_depth == 0 and self._dirty:
                    self.commit()

    def refresh(self) -> None:
        """Re-read the file, picking up another writer's commits."""
        with self._lock:
            if self.path.exists():
                self._load()
            else:
                self._reset()

    # -- records ----------------------------------------------------------

    def _append(self, path, device, version, values) -> int:
        sig_id = len(self._paths)
        self._paths.append(path)
        self._devices.append(device)
        self._versions.append(version)
        self._values.append(values)
        self._key[(path, version)] = sig_id
        self._by_device.setdefault(device, []).append(sig_id)
        return sig_id

    def put(self, record: StoreRecord) -> int:
        with self._lock:
            existing = self._key.get((record.image_path, record.extractor_version))
            if existing is not None:
                same = (
                    self._devices[existing] == record.device_id
                    and self._values[existing].tobytes() == record.values.tobytes()
                )
                if not same:
                    raise StoreConflict(
                        f"{record.image_path} already stored with different content "
                        f"for extractor {record.extractor_version[:12]}"
                    )
                return existing
            sig_id = self._append(
                record.image_path, record.device_id, record.extractor_version,
                record.values.copy(),
            )
            self._dirty = True
            if self._batch_depth == 0:
                self.commit()
            return sig_id

    def get(self, sig_id: int) -> StoreRecord:
        with self._lock:
            if not 0 <= sig_id < len(self._paths):
                raise KeyError(sig_id)
            return StoreRecord(
                self._paths[sig_id], self._devices[sig_id], self._versions[sig_id],
                self._values[sig_id].copy(), sig_id,
            )

    def find(self, image_path: str, extractor_version: str) -> Optional[int]:
        return self._key.get((image_path, extractor_version))

    def get_by_device(self, device_id: str, extractor_version: str) -> List[StoreRecord]:
        with self._lock:
            ids = [
                i for i in self._by_device.get(device_id, [])
                if self._versions[i] == extractor_version
            ]
            return [self.get(i) for i in ids]

    def versions(self) -> List[str]:
        return sorted(set(self._versions))

    def __len__(self) -> int:
        return len(self._paths)

    def __iter__(self) -> Iterator[StoreRecord]:
        return (self.get(i) for i in range(len(self)))
