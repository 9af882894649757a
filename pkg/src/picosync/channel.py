"""Fiber channel: loss, delay with slow length drift, and Raman noise.

The Raman rate is a direct parameter (noise photons reaching the detector
input per clock slot). It is not derived from launched clock power; see
:func:`picosync.analysis.calibrate_noise` for how it is fitted to a target CAR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .source import ConfigError
from .timebase import (
    DEFAULT_PERIOD_FS,
    FS_PER_S,
    argsort_arrays,
    normalize_arrays,
    seconds,
)

C_VACUUM_M_PER_S = 299_792_458.0
SMF_GROUP_INDEX = 1.4682


def fiber_delay_fs(length_m: float, group_index: float = SMF_GROUP_INDEX) -> int:
    return int(round(length_m * group_index / C_VACUUM_M_PER_S * FS_PER_S))


class DriftKind(str, Enum):
    NONE = "none"
    SINUSOID = "sinusoid"
    RANDOM_WALK = "random_walk"
    SUM = "sum"


class RamanProfile(str, Enum):
    UNIFORM_PERIOD = "uniform_period"
    PULSE_GATED = "pulse_gated"


@dataclass(frozen=True)
class DriftModel:
    kind: DriftKind = DriftKind.NONE
    amplitude_fs: float = 0.0
    period_s: float = 1.0
    walk_sigma_fs_per_sqrt_s: float = 0.0
    walk_step_s: float = 1.0
    components: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", DriftKind(self.kind))
        object.__setattr__(self, "components", tuple(self.components))
        for name in ("amplitude_fs", "period_s", "walk_sigma_fs_per_sqrt_s", "walk_step_s"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"drift {name} must be finite")
        if self.amplitude_fs < 0 or self.walk_sigma_fs_per_sqrt_s < 0:
            raise ConfigError("drift amplitudes must be >= 0")
        if self.period_s <= 0 or self.walk_step_s <= 0:
            raise ConfigError("drift periods must be positive")


# knots of the random-walk path are drawn in blocks so any time can be
# evaluated without generating the whole path before it
_WALK_BLOCK = 4096


def _walk_knots(seed, sigma_step: float, j_max: int) -> np.ndarray:
    n_blocks = j_max // _WALK_BLOCK + 1
    incs = [
        np.random.default_rng([int(seed), 0x57A1C, b]).normal(0.0, sigma_step, _WALK_BLOCK)
        for b in range(n_blocks)
    ]
    return np.concatenate(([0.0], np.cumsum(np.concatenate(incs))))


def _drift_float(t_s: np.ndarray, m: DriftModel, seed) -> np.ndarray:
    if m.kind is DriftKind.NONE:
        return np.zeros_like(t_s)
    if m.kind is DriftKind.SINUSOID:
        return m.amplitude_fs * np.sin(2.0 * np.pi * t_s / m.period_s)
    if m.kind is DriftKind.RANDOM_WALK:
        if m.walk_sigma_fs_per_sqrt_s == 0 or t_s.size == 0:
            return np.zeros_like(t_s)
        x = t_s / m.walk_step_s
        j_max = int(np.floor(x.max())) + 1
        knots = _walk_knots(seed, m.walk_sigma_fs_per_sqrt_s * math.sqrt(m.walk_step_s), j_max)
        return np.interp(x, np.arange(knots.size, dtype=np.float64), knots)
    total = np.zeros_like(t_s)
    for i, comp in enumerate(m.components):
        total += _drift_float(t_s, comp, (int(seed) * 1_000_003 + i) % 2**63)
    return total


def drift_at(t_abs_s, m: DriftModel, seed=0):
    """Fiber delay change at time ``t_abs_s`` (seconds), in integer fs.

    Deterministic for a given seed, and zero at ``t = 0``. Accepts a scalar or
    an array.
    """
    t = np.asarray(t_abs_s, dtype=np.float64)
    if t.size and t.min() < 0:
        raise ValueError("drift time must be >= 0")
    out = np.rint(_drift_float(np.atleast_1d(t), m, seed)).astype(np.int64)
    return int(out[0]) if t.ndim == 0 else out


@dataclass(frozen=True)
class ChannelConfig:
    loss_db: float = 0.0
    base_delay_fs: int = fiber_delay_fs(11_000.0)
    drift: DriftModel = field(default_factory=DriftModel)
    raman_rate_per_slot: float = 0.0
    raman_profile: RamanProfile = RamanProfile.PULSE_GATED
    clock_pulse_width_fs: int = 2_500_000
    period_fs: int = DEFAULT_PERIOD_FS

    def __post_init__(self):
        object.__setattr__(self, "raman_profile", RamanProfile(self.raman_profile))
        self.validate()

    def validate(self) -> None:
        if not self.loss_db >= 0:
            raise ConfigError("loss_db must be >= 0")
        if not self.raman_rate_per_slot >= 0:
            raise ConfigError("raman_rate_per_slot must be >= 0")
        if self.period_fs <= 0:
            raise ConfigError("period_fs must be positive")
        if not 0 < self.clock_pulse_width_fs <= self.period_fs:
            raise ConfigError("clock_pulse_width_fs must be in (0, period_fs]")

    @property
    def transmission(self) -> float:
        if math.isinf(self.loss_db):
            return 0.0
        return 10.0 ** (-self.loss_db / 10.0)

    @property
    def raman_gate_fs(self) -> int:
        if self.raman_profile is RamanProfile.PULSE_GATED:
            return self.clock_pulse_width_fs
        return self.period_fs


def _delay_arrays(slot, offset, cfg: ChannelConfig, seed):
    extra = np.full(len(slot), cfg.base_delay_fs, dtype=np.int64)
    if cfg.drift.kind is not DriftKind.NONE and len(slot):
        extra += drift_at(seconds(slot, offset, cfg.period_fs), cfg.drift, seed)
    return normalize_arrays(slot, np.asarray(offset, dtype=np.int64) + extra, cfg.period_fs)


def propagate(slot, offset_fs, cfg: ChannelConfig, seed, drift_seed=0):
    """Send photons through the channel.

    Returns ``(kept, slot, offset_fs)`` where ``kept`` indexes the surviving
    input photons and the arrays hold their arrival times. ``drift_seed``
    selects the fiber's drift realisation and is shared with the clock light
    in the same fiber.
    """
    cfg.validate()
    slot = np.asarray(slot)
    rng = np.random.default_rng(seed)
    survive = rng.random(slot.size) < cfg.transmission
    kept = np.flatnonzero(survive)
    s, o = _delay_arrays(slot[kept], np.asarray(offset_fs)[kept], cfg, drift_seed)
    return kept, s, o


def sample_raman(slot_range, cfg: ChannelConfig, seed, drift_seed=0):
    """Raman noise arrivals produced by clock pulses of slots in ``slot_range``.

    Per slot the count is Poisson; times are uniform over the clock pulse
    window (or the whole period), centred on the slot's nominal time and
    delayed like the signal. Returns sorted ``(slot, offset_fs)``.
    """
    s0, s1 = int(slot_range[0]), int(slot_range[1])
    n = max(s1 - s0, 0)
    rate = cfg.raman_rate_per_slot
    if rate == 0 or n == 0:
        return np.empty(0, np.uint64), np.empty(0, np.int64)
    rng = np.random.default_rng(seed)
    # per-slot Poisson == Poisson total with uniformly assigned slots
    total = rng.poisson(rate * n)
    slots = np.sort(rng.integers(s0, s1, size=total, dtype=np.int64))
    gate = cfg.raman_gate_fs
    offsets = rng.integers(-(gate // 2), gate - gate // 2, size=total, dtype=np.int64)
    s, o = _delay_arrays(slots, offsets, cfg, drift_seed)
    order = argsort_arrays(s, o, cfg.period_fs)
    return s[order], o[order]
