"""Pulsed photon-pair source.

Pairs are drawn statistically per clock slot. Empty slots are skipped by
drawing geometric gaps between occupied slots, so the cost scales with the
number of pairs rather than the number of slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .timebase import DEFAULT_PERIOD_FS, argsort_arrays, normalize_arrays


class ConfigError(ValueError):
    pass


class MultiPairModel(str, Enum):
    POISSON = "poisson"
    THERMAL = "thermal"


PAIR_DTYPE = np.dtype([("slot", "<u8"), ("offset_fs", "<i8"), ("pair_index", "u1")])


@dataclass(frozen=True)
class SourceConfig:
    """Per-pulse pair statistics.

    ``pair_prob_per_pulse`` is P(at least one pair in a slot) unless
    ``prob_is_mean`` is set, in which case it is the mean pair number.
    """

    pair_prob_per_pulse: float = 0.01
    multi_pair_model: MultiPairModel = MultiPairModel.POISSON
    emission_sigma_fs: float = 31_400.0
    period_fs: int = DEFAULT_PERIOD_FS
    prob_is_mean: bool = False

    def __post_init__(self):
        object.__setattr__(self, "multi_pair_model", MultiPairModel(self.multi_pair_model))
        self.validate()

    def validate(self) -> None:
        p = self.pair_prob_per_pulse
        if not (0.0 <= p <= 0.5) or math.isnan(p):
            raise ConfigError(f"pair_prob_per_pulse must be in [0, 0.5], got {p}")
        if not self.emission_sigma_fs >= 0:
            raise ConfigError("emission_sigma_fs must be >= 0")
        if self.period_fs <= 0:
            raise ConfigError("period_fs must be positive")

    @property
    def mean_pairs(self) -> float:
        """Mean pair number per slot."""
        p = self.pair_prob_per_pulse
        if self.prob_is_mean:
            return p
        if self.multi_pair_model is MultiPairModel.POISSON:
            return -math.log1p(-p)
        return p / (1.0 - p)

    @property
    def occupied_prob(self) -> float:
        """P(slot holds >= 1 pair)."""
        if not self.prob_is_mean:
            return self.pair_prob_per_pulse
        mu = self.pair_prob_per_pulse
        if self.multi_pair_model is MultiPairModel.POISSON:
            return -math.expm1(-mu)
        return mu / (1.0 + mu)

    @property
    def second_factorial_moment(self) -> float:
        """E[N(N-1)] of the per-slot pair number."""
        mu = self.mean_pairs
        if self.multi_pair_model is MultiPairModel.POISSON:
            return mu * mu
        return 2.0 * mu * mu


def _occupied_slots(rng, n_slots: int, p: float, start_slot: int) -> np.ndarray:
    if p <= 0.0 or n_slots <= 0:
        return np.empty(0, dtype=np.int64)
    if p >= 1.0:
        return np.arange(start_slot, start_slot + n_slots, dtype=np.int64)
    expected = n_slots * p
    batch = int(expected + 6.0 * math.sqrt(expected) + 16)
    parts = []
    last = start_slot - 1
    end = start_slot + n_slots
    while last < end - 1:
        gaps = rng.geometric(p, size=batch)
        slots = last + np.cumsum(gaps, dtype=np.int64)
        parts.append(slots)
        last = int(slots[-1])
    slots = np.concatenate(parts)
    return slots[slots < end]


def _truncated_poisson(rng, mu: float, n: int) -> np.ndarray:
    """Pair numbers conditioned on >= 1, by inversion."""
    if n == 0:
        return np.empty(0, dtype=np.int64)
    norm = -math.expm1(-mu)
    pk = []
    term = math.exp(-mu)
    cdf = 0.0
    k = 0
    while True:
        k += 1
        term *= mu / k
        cdf += term / norm
        pk.append(cdf)
        if 1.0 - cdf < 1e-17 or k > 200:
            break
    table = np.asarray(pk)
    table[-1] = 1.0
    u = rng.random(n)
    return np.searchsorted(table, u, side="right").astype(np.int64) + 1


def sample_emissions(
    n_slots: int, cfg: SourceConfig, seed, start_slot: int = 0
) -> np.ndarray:
    """Pair emissions in slots ``[start_slot, start_slot + n_slots)``.

    Returns a structured array (``PAIR_DTYPE``) sorted by emission time. Both
    photons of a pair share the one emission time in the record.
    """
    if n_slots < 0:
        raise ConfigError("n_slots must be >= 0")
    cfg.validate()
    rng = np.random.default_rng(seed)
    occupied = _occupied_slots(rng, n_slots, cfg.occupied_prob, start_slot)
    if cfg.multi_pair_model is MultiPairModel.POISSON:
        counts = _truncated_poisson(rng, cfg.mean_pairs, occupied.size)
    else:
        counts = rng.geometric(1.0 - cfg.occupied_prob, size=occupied.size).astype(np.int64)

    slots = np.repeat(occupied, counts)
    first = np.cumsum(counts) - counts
    pair_index = np.arange(slots.size, dtype=np.int64) - np.repeat(first, counts)
    if cfg.emission_sigma_fs > 0:
        offsets = np.rint(rng.normal(0.0, cfg.emission_sigma_fs, slots.size)).astype(np.int64)
    else:
        offsets = np.zeros(slots.size, dtype=np.int64)
    slot_u, off = normalize_arrays(slots, offsets, cfg.period_fs)

    out = np.empty(slots.size, dtype=PAIR_DTYPE)
    out["slot"] = slot_u
    out["offset_fs"] = off
    out["pair_index"] = np.minimum(pair_index, 255)
    order = argsort_arrays(out["slot"], out["offset_fs"], cfg.period_fs)
    return out[order]
