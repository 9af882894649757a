"""SNSPD and time-to-digital converter model.

Detection is split in two stages so the engine can insert the node clock
between them:

* :func:`detect_analog` - efficiency, Gaussian jitter, dark counts and a
  non-paralyzable dead time, all in the true timebase;
* :func:`tdc_record` - subtraction of the node clock phase, TDC jitter and
  quantisation to the TDC bin.

:func:`detect` runs both with a zero clock phase.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numba
import numpy as np

from .source import ConfigError
from .timebase import (
    DEFAULT_PERIOD_FS,
    FS_PER_S,
    Timestamp,
    argsort_arrays,
    floor_key,
    from_relative_fs,
    is_sorted_arrays,
    normalize_arrays,
    relative_fs,
    sigma_from_fwhm,
)


class TagKind(IntEnum):
    SIGNAL = 0
    RAMAN = 1
    DARK = 2


TAG_DTYPE = np.dtype(
    [
        ("node_id", "u1"),
        ("channel_id", "u1"),
        ("kind", "u1"),
        ("pad", "u1"),
        ("reserved", "<u4"),
        ("slot", "<u8"),
        ("offset_fs", "<i8"),
    ]
)
assert TAG_DTYPE.itemsize == 24


@dataclass(frozen=True)
class TimeTag:
    node_id: int
    channel_id: int
    t: Timestamp
    kind: TagKind = TagKind.SIGNAL


def tags_from_records(records: np.ndarray) -> list[TimeTag]:
    return [
        TimeTag(int(r["node_id"]), int(r["channel_id"]), Timestamp(int(r["slot"]), int(r["offset_fs"])), TagKind(int(r["kind"])))
        for r in records
    ]


def make_tags(slot, offset_fs, kind=TagKind.SIGNAL, node_id=0, channel_id=0) -> np.ndarray:
    out = np.zeros(len(slot), dtype=TAG_DTYPE)
    out["slot"] = slot
    out["offset_fs"] = offset_fs
    out["kind"] = kind
    out["node_id"] = node_id
    out["channel_id"] = channel_id
    return out


def sort_tags(tags: np.ndarray, period_fs: int) -> np.ndarray:
    return tags[argsort_arrays(tags["slot"], tags["offset_fs"], period_fs)]


class UnsortedStreamError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 1.0
    jitter_fwhm_fs: int = 50_000
    dead_time_fs: int = 50_000_000
    dark_rate_hz: float = 0.0
    tdc_bin_fs: int = 1_000
    tdc_jitter_fwhm_fs: int = 7_000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigError("efficiency must be in [0, 1]")
        for name in ("jitter_fwhm_fs", "dead_time_fs", "dark_rate_hz", "tdc_jitter_fwhm_fs"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.tdc_bin_fs < 0:
            raise ConfigError("tdc_bin_fs must be >= 0")

    @property
    def jitter_sigma_fs(self) -> float:
        return float(sigma_from_fwhm(self.jitter_fwhm_fs))

    @property
    def tdc_sigma_fs(self) -> float:
        return float(sigma_from_fwhm(self.tdc_jitter_fwhm_fs))

    @property
    def timing_variance_fs2(self) -> float:
        """Variance one tag's time picks up from detector + TDC."""
        q = self.tdc_bin_fs**2 / 12.0 if self.tdc_bin_fs > 1 else 0.0
        return self.jitter_sigma_fs**2 + self.tdc_sigma_fs**2 + q


@numba.njit(cache=True)
def _dead_time_mask(t_fs, dead_fs, last_fs, has_last):
    keep = np.zeros(t_fs.size, dtype=np.bool_)
    last = last_fs
    have = has_last
    for i in range(t_fs.size):
        if (not have) or t_fs[i] - last >= dead_fs:
            keep[i] = True
            last = t_fs[i]
            have = True
    return keep


def dead_time_filter(slot, offset_fs, dead_time_fs: int, period_fs: int, last_accepted=None):
    """Non-paralyzable dead time on a sorted stream.

    ``last_accepted`` is a ``(slot, offset_fs)`` of the previous accepted tag
    (from an earlier chunk), or None. Returns a boolean keep-mask.
    """
    n = len(slot)
    if n == 0:
        return np.zeros(0, dtype=bool)
    if dead_time_fs <= 0:
        return np.ones(n, dtype=bool)
    ref = int(floor_key(slot[:1], offset_fs[:1], period_fs)[0][0])
    t = relative_fs(slot, offset_fs, ref, period_fs)
    if last_accepted is None:
        return _dead_time_mask(t, np.int64(dead_time_fs), np.int64(0), False)
    lt = relative_fs(np.array([last_accepted[0]]), np.array([last_accepted[1]]), ref, period_fs)[0]
    return _dead_time_mask(t, np.int64(dead_time_fs), np.int64(lt), True)


def _jitter(rng, slot, offset, sigma, period_fs):
    if sigma <= 0 or len(slot) == 0:
        return slot, offset
    d = np.rint(rng.normal(0.0, sigma, len(slot))).astype(np.int64)
    return normalize_arrays(slot, np.asarray(offset, dtype=np.int64) + d, period_fs)


def sample_dark(span, rate_hz: float, period_fs: int, rng):
    s0, s1 = int(span[0]), int(span[1])
    duration_fs = max(s1 - s0, 0) * period_fs
    if rate_hz <= 0 or duration_fs == 0:
        return np.empty(0, np.uint64), np.empty(0, np.int64)
    n = rng.poisson(rate_hz * duration_fs / FS_PER_S)
    t = np.sort(rng.integers(0, duration_fs, size=n, dtype=np.int64))
    return from_relative_fs(t, s0, period_fs)


def detect_analog(
    slot,
    offset_fs,
    cfg: DetectorConfig,
    span,
    rng,
    kind=None,
    period_fs: int = DEFAULT_PERIOD_FS,
    check_sorted: bool = True,
):
    """Efficiency, jitter and dark counts. Result is sorted but not yet
    dead-time filtered; returns a ``TAG_DTYPE`` array."""
    slot = np.asarray(slot, dtype=np.uint64)
    offset_fs = np.asarray(offset_fs, dtype=np.int64)
    if check_sorted and not is_sorted_arrays(slot, offset_fs, period_fs):
        raise UnsortedStreamError("arrivals must be sorted by time")
    if kind is None:
        kind = np.full(slot.size, TagKind.SIGNAL, dtype=np.uint8)
    kind = np.asarray(kind, dtype=np.uint8)

    if cfg.efficiency < 1.0:
        kept = rng.random(slot.size) < cfg.efficiency
        slot, offset_fs, kind = slot[kept], offset_fs[kept], kind[kept]
    slot, offset_fs = _jitter(rng, slot, offset_fs, cfg.jitter_sigma_fs, period_fs)
    ds, do = sample_dark(span, cfg.dark_rate_hz, period_fs, rng)

    tags = np.zeros(slot.size + ds.size, dtype=TAG_DTYPE)
    tags["slot"][: slot.size] = slot
    tags["offset_fs"][: slot.size] = offset_fs
    tags["kind"][: slot.size] = kind
    tags["slot"][slot.size :] = ds
    tags["offset_fs"][slot.size :] = do
    tags["kind"][slot.size :] = TagKind.DARK
    return sort_tags(tags, period_fs)


def tdc_record(tags: np.ndarray, cfg: DetectorConfig, rng, period_fs: int = DEFAULT_PERIOD_FS, phase_fs=None):
    """Timestamp tags against a local clock with phase ``phase_fs`` (fs,
    per tag or scalar), add TDC jitter and quantise to the TDC bin."""
    out = tags.copy()
    if out.size == 0:
        return out
    off = out["offset_fs"].astype(np.int64)
    if phase_fs is not None:
        off = off - np.rint(np.asarray(phase_fs, dtype=np.float64)).astype(np.int64)
    if cfg.tdc_sigma_fs > 0:
        off = off + np.rint(rng.normal(0.0, cfg.tdc_sigma_fs, out.size)).astype(np.int64)
    s, o = floor_key(out["slot"], off, period_fs)
    if cfg.tdc_bin_fs > 1:
        b = cfg.tdc_bin_fs
        o = (o + b // 2) // b * b
    s, o = normalize_arrays(s, o, period_fs)
    out["slot"] = s
    out["offset_fs"] = o
    # TDC jitter may swap tags closer than a few ps; stable re-sort
    order = np.lexsort(floor_key(s, o, period_fs)[::-1])
    return out[order]


def detect(
    slot,
    offset_fs,
    cfg: DetectorConfig,
    span,
    seed,
    kind=None,
    period_fs: int = DEFAULT_PERIOD_FS,
    node_id: int = 0,
    channel_id: int = 0,
) -> np.ndarray:
    """Full detector chain on one sorted arrival stream.

    ``span`` is the ``[first, last)`` slot range over which dark counts are
    injected. Returns a sorted ``TAG_DTYPE`` array.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    tags = detect_analog(slot, offset_fs, cfg, span, rng, kind=kind, period_fs=period_fs)
    keep = dead_time_filter(tags["slot"], tags["offset_fs"], cfg.dead_time_fs, period_fs)
    tags = tdc_record(tags[keep], cfg, rng, period_fs=period_fs)
    tags["node_id"] = node_id
    tags["channel_id"] = channel_id
    return tags
