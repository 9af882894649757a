"""Exact two-part event times.

A time is stored as ``(slot, offset_fs)``: ``slot`` counts clock periods from
the run epoch and ``offset_fs`` is a signed femtosecond offset from the
nominal slot time ``slot * period_fs``. All arithmetic is integer, so
picosecond-scale differences stay exact over runs of arbitrary length.

Scalar helpers work on :class:`Timestamp`; the ``*_arrays`` helpers are the
vectorised equivalents used on event streams (``uint64`` slots, ``int64``
offsets).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FS_PER_S = 10**15
FS_PER_PS = 1000
OFFSET_LIMIT_FS = 10**9
DIFF_LIMIT_FS = 2**62
DEFAULT_PERIOD_FS = 5_000_000  # 200 MHz


class TimebaseError(ValueError):
    pass


class TimeOverflowError(TimebaseError, OverflowError):
    pass


@dataclass(frozen=True, order=False)
class Timestamp:
    slot: int
    offset_fs: int = 0

    def __post_init__(self):
        if self.slot < 0:
            raise TimebaseError("time before epoch")

    def absolute_fs(self, period_fs: int) -> int:
        return self.slot * period_fs + self.offset_fs

    @classmethod
    def from_fs(cls, t_fs: int, period_fs: int) -> "Timestamp":
        return normalize(cls(0, 0), period_fs, extra_fs=t_fs)


def _check_period(period_fs: int) -> None:
    if period_fs <= 0:
        raise TimebaseError(f"period must be positive, got {period_fs}")


def _trunc_div(a: int, b: int) -> int:
    q = abs(a) // b
    return q if a >= 0 else -q


def normalize(t: Timestamp, period_fs: int, extra_fs: int = 0) -> Timestamp:
    """Move whole periods from the offset into the slot.

    The offset keeps its sign (truncating division), so a slightly early
    event stays in its own slot with a negative offset.
    """
    _check_period(period_fs)
    offset = t.offset_fs + extra_fs
    carry = _trunc_div(offset, period_fs)
    slot = t.slot + carry
    if slot < 0:
        raise TimebaseError("time before epoch")
    return Timestamp(slot, offset - carry * period_fs)


def diff_fs(a: Timestamp, b: Timestamp, period_fs: int) -> int:
    """Exact ``a - b`` in femtoseconds."""
    _check_period(period_fs)
    d = (a.slot - b.slot) * period_fs + (a.offset_fs - b.offset_fs)
    if abs(d) >= DIFF_LIMIT_FS:
        raise TimeOverflowError(f"time difference {d} fs exceeds 2**62 fs")
    return d


def add_fs(t: Timestamp, delta_fs: int, period_fs: int) -> Timestamp:
    return normalize(t, period_fs, extra_fs=delta_fs)


# --- vectorised helpers ---------------------------------------------------


def normalize_arrays(slot, offset_fs, period_fs: int):
    """Vectorised :func:`normalize`. Returns new ``(uint64, int64)`` arrays."""
    _check_period(period_fs)
    slot = np.asarray(slot, dtype=np.int64)
    offset = np.asarray(offset_fs, dtype=np.int64)
    carry = np.sign(offset) * (np.abs(offset) // period_fs)
    new_slot = slot + carry
    if new_slot.size and new_slot.min() < 0:
        raise TimebaseError("time before epoch")
    return new_slot.astype(np.uint64), (offset - carry * period_fs).astype(np.int64)


def floor_key(slot, offset_fs, period_fs: int):
    """Slot/offset pair with the offset moved into ``[0, period)``.

    Lexicographic order on the result is time order, which the signed
    representation does not guarantee.
    """
    offset = np.asarray(offset_fs, dtype=np.int64)
    borrow = np.floor_divide(offset, period_fs)
    s = np.asarray(slot, dtype=np.int64) + borrow
    return s, offset - borrow * period_fs


def argsort_arrays(slot, offset_fs, period_fs: int):
    s, o = floor_key(slot, offset_fs, period_fs)
    return np.lexsort((o, s))


def is_sorted_arrays(slot, offset_fs, period_fs: int, strict: bool = False) -> bool:
    if len(slot) < 2:
        return True
    s, o = floor_key(slot, offset_fs, period_fs)
    ds = np.diff(s)
    do = np.diff(o)
    if strict:
        ok = (ds > 0) | ((ds == 0) & (do > 0))
    else:
        ok = (ds > 0) | ((ds == 0) & (do >= 0))
    return bool(ok.all())


def relative_fs(slot, offset_fs, ref_slot: int, period_fs: int):
    """Times relative to ``ref_slot * period`` as ``int64`` femtoseconds."""
    s = np.asarray(slot, dtype=np.int64) - np.int64(ref_slot)
    if s.size:
        span = max(abs(int(s.min())), abs(int(s.max()))) + 1
        if span * period_fs >= DIFF_LIMIT_FS:
            raise TimeOverflowError("stream span exceeds 2**62 fs relative to reference")
    return s * np.int64(period_fs) + np.asarray(offset_fs, dtype=np.int64)


def from_relative_fs(t_fs, ref_slot: int, period_fs: int):
    """Inverse of :func:`relative_fs`, normalised."""
    t = np.asarray(t_fs, dtype=np.int64)
    carry = np.floor_divide(t, period_fs)
    slot = carry + np.int64(ref_slot)
    return normalize_arrays(slot, t - carry * period_fs, period_fs)


def diff_fs_arrays(slot_a, off_a, slot_b, off_b, period_fs: int):
    ds = np.asarray(slot_a, dtype=np.int64) - np.asarray(slot_b, dtype=np.int64)
    if ds.size and int(np.abs(ds).max()) * period_fs >= DIFF_LIMIT_FS:
        raise TimeOverflowError("time difference exceeds 2**62 fs")
    return ds * np.int64(period_fs) + (
        np.asarray(off_a, dtype=np.int64) - np.asarray(off_b, dtype=np.int64)
    )


def seconds(slot, offset_fs, period_fs: int):
    """Approximate float seconds, for slow models (drift) only."""
    return (
        np.asarray(slot, dtype=np.float64) * (period_fs / FS_PER_S)
        + np.asarray(offset_fs, dtype=np.float64) / FS_PER_S
    )


def sigma_from_fwhm(fwhm):
    return fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0)))
