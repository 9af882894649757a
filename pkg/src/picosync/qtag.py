"""QTAG binary time-tag files.

Layout (little-endian): a 22-byte header ``b"QTAG"``, ``u16`` version,
``u64`` period_fs, ``u64`` record_count, followed by ``record_count``
24-byte :data:`~picosync.detector.TAG_DTYPE` records.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .detector import TAG_DTYPE

MAGIC = b"QTAG"
VERSION = 1
HEADER = struct.Struct("<4sHQQ")
RECORD_SIZE = TAG_DTYPE.itemsize


class QtagError(ValueError):
    pass


def _read_header(fh):
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise QtagError("truncated header")
    magic, version, period_fs, count = HEADER.unpack(raw)
    if magic != MAGIC:
        raise QtagError(f"bad magic {magic!r}")
    if version != VERSION:
        raise QtagError(f"unsupported version {version}")
    return period_fs, count


class TagWriter:
    """Append sorted tag chunks to a QTAG file; the record count in the
    header is patched on close."""

    def __init__(self, path, period_fs: int):
        self.path = Path(path)
        self.period_fs = int(period_fs)
        self.count = 0
        self._fh = open(self.path, "wb")
        self._fh.write(HEADER.pack(MAGIC, VERSION, self.period_fs, 0))

    def write(self, tags: np.ndarray) -> None:
        tags = np.ascontiguousarray(tags, dtype=TAG_DTYPE)
        self._fh.write(tags.tobytes())
        self.count += tags.size

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(HEADER.pack(MAGIC, VERSION, self.period_fs, self.count))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_tags(path, tags: np.ndarray, period_fs: int) -> None:
    with TagWriter(path, period_fs) as w:
        w.write(tags)


def iter_tags(path, chunk_records: int = 1 << 20):
    """Yield ``(period_fs, chunk)`` pieces of a QTAG file."""
    with open(path, "rb") as fh:
        period_fs, count = _read_header(fh)
        done = 0
        while done < count:
            n = min(chunk_records, count - done)
            raw = fh.read(n * RECORD_SIZE)
            if len(raw) < n * RECORD_SIZE:
                got = done + len(raw) // RECORD_SIZE
                raise QtagError(f"truncated file: record {got} of {count} is incomplete")
            done += n
            yield period_fs, np.frombuffer(raw, dtype=TAG_DTYPE).copy()
        if count == 0:
            yield period_fs, np.empty(0, dtype=TAG_DTYPE)


def read_tags(path) -> tuple[np.ndarray, int]:
    """Whole file as ``(tags, period_fs)``."""
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        period_fs, count = _read_header(fh)
    have = (size - HEADER.size) // RECORD_SIZE
    if have < count:
        raise QtagError(f"truncated file: record {have} of {count} is incomplete")
    chunks = [c for _, c in iter_tags(path)]
    return np.concatenate(chunks), period_fs
