"""Clock distribution and phase locking at the end nodes.

The central oscillator defines the timebase. Each end node receives the clock
pulse train through its fiber and steers a local oscillator with a discrete
first-order loop: every ``averaging_edges`` received edges the mean measured
phase error ``e`` is formed and the local phase is corrected by
``-loop_gain * e``.

Two evaluation paths share that loop:

* :func:`lock_phase` runs it edge by edge on an explicit received-edge
  stream;
* :class:`NodeClock` samples the same process exactly at arbitrary sorted
  edge indices without visiting the edges in between (the loop residual is an
  AR(1) process, so its value ``d`` updates later is
  ``a**d * x + N(0, q (1 - a**(2d)) / (1 - a**2))``). This is what lets the
  engine and the drift studies cover hours of 200 MHz edges.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.signal import lfilter

from .channel import DriftModel, drift_at
from .source import ConfigError
from .timebase import FS_PER_S, normalize_arrays, relative_fs, sigma_from_fwhm


class SyncError(RuntimeError):
    pass


@dataclass(frozen=True)
class OscillatorConfig:
    frequency_hz: float = 200e6
    edge_jitter_fwhm_fs: float = 0.0
    phase_walk_fs_per_sqrt_s: float = 0.0

    def __post_init__(self):
        if not self.frequency_hz > 0:
            raise ConfigError("frequency_hz must be positive")
        if self.edge_jitter_fwhm_fs < 0 or self.phase_walk_fs_per_sqrt_s < 0:
            raise ConfigError("oscillator noise parameters must be >= 0")

    @property
    def period_fs(self) -> int:
        return int(round(FS_PER_S / self.frequency_hz))

    @property
    def edge_sigma_fs(self) -> float:
        return float(sigma_from_fwhm(self.edge_jitter_fwhm_fs))

    def walk_var_per_edge(self) -> float:
        return self.phase_walk_fs_per_sqrt_s**2 * self.period_fs / FS_PER_S


@dataclass(frozen=True)
class SyncConfig:
    rec_jitter_fwhm_fs: float = 0.0
    loop_gain: float = 0.01
    averaging_edges: int = 1
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.loop_gain <= 1.0:
            raise ConfigError("loop_gain must be in (0, 1]")
        if self.averaging_edges < 1:
            raise ConfigError("averaging_edges must be >= 1")
        if self.rec_jitter_fwhm_fs < 0:
            raise ConfigError("rec_jitter_fwhm_fs must be >= 0")

    @property
    def rec_sigma_fs(self) -> float:
        return float(sigma_from_fwhm(self.rec_jitter_fwhm_fs))


@dataclass
class ClockPhaseSeries:
    time_s: np.ndarray
    offset_fs: np.ndarray

    def __post_init__(self):
        self.time_s = np.asarray(self.time_s, dtype=np.float64)
        self.offset_fs = np.asarray(self.offset_fs, dtype=np.float64)
        if self.time_s.shape != self.offset_fs.shape:
            raise ValueError("time_s and offset_fs must have equal length")
        if self.time_s.size > 1 and not np.all(np.diff(self.time_s) > 0):
            raise ValueError("sample times must be strictly increasing")

    def __len__(self):
        return self.time_s.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time_s", "offset_fs"])
            for t, v in zip(self.time_s, self.offset_fs):
                w.writerow([repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "ClockPhaseSeries":
        data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1])


def emit_clock_edges(n: int, cfg: OscillatorConfig, seed):
    """Edges of a free-running oscillator: ``k * period`` plus a random-walk
    phase and white per-edge jitter. Returns normalised ``(slot, offset)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    phase = np.zeros(n, dtype=np.float64)
    if cfg.phase_walk_fs_per_sqrt_s > 0 and n > 1:
        step = math.sqrt(cfg.walk_var_per_edge())
        phase[1:] = np.cumsum(rng.normal(0.0, step, n - 1))
    if cfg.edge_sigma_fs > 0:
        phase += rng.normal(0.0, cfg.edge_sigma_fs, n)
    return normalize_arrays(np.arange(n, dtype=np.int64), np.rint(phase).astype(np.int64), cfg.period_fs)


def residual_sigma_fs(cfg: SyncConfig, local: OscillatorConfig | None = None, extra_meas_sigma_fs: float = 0.0) -> float:
    """Steady-state rms of (local phase - received phase) for white
    measurement noise, sampled at loop updates."""
    g = cfg.loop_gain
    m = cfg.averaging_edges
    meas_var = (cfg.rec_sigma_fs**2 + extra_meas_sigma_fs**2) / m
    q = g * g * meas_var
    if local is not None:
        q += local.walk_var_per_edge() * m
    return math.sqrt(q / (g * (2.0 - g)))


def ramp_lag_fs(ramp_fs_per_s: float, loop_gain: float, edge_rate_hz: float, averaging_edges: int = 1) -> float:
    """Steady-state tracking lag of the first-order loop on a linear ramp."""
    return ramp_fs_per_s * averaging_edges / (loop_gain * edge_rate_hz)


def lock_phase(received_slot, received_offset, cfg: SyncConfig, local: OscillatorConfig, seed) -> ClockPhaseSeries:
    """Run the loop edge by edge on a received clock stream.

    Each received edge is paired with the nearest local slot; its phase
    relative to that slot (unwrapped across the stream) is the loop target.
    The series holds one sample per loop update: the local phase in fs
    relative to the central timebase.
    """
    slot = np.asarray(received_slot)
    period = local.period_fs
    n = slot.size
    if n == 0:
        if cfg.enabled:
            raise SyncError("no clock received")
        return ClockPhaseSeries(np.empty(0), np.empty(0))
    rng = np.random.default_rng(seed)
    t_rel = relative_fs(slot, received_offset, int(slot[0]), period)
    j = np.floor_divide(t_rel + period // 2, period)
    target = np.unwrap((t_rel - j * period).astype(np.float64), period=period)

    m = cfg.averaging_edges
    n_upd = n // m
    if n_upd == 0:
        raise SyncError(f"need at least averaging_edges={m} received edges")
    blocks = slice(0, n_upd * m)
    times = ((j[blocks][::m] + int(slot[0])) * period) / FS_PER_S
    walk_sd = math.sqrt(local.walk_var_per_edge() * m)

    if cfg.enabled:
        meas = target[blocks]
        if cfg.rec_sigma_fs > 0:
            meas = meas + rng.normal(0.0, cfg.rec_sigma_fs, meas.size)
        mean_meas = meas.reshape(n_upd, m).mean(axis=1)
        walk = rng.normal(0.0, walk_sd, n_upd) if walk_sd > 0 else np.zeros(n_upd)
        g = cfg.loop_gain
        a = 1.0 - g
        phi = np.empty(n_upd)
        phi[0] = mean_meas[0]
        if n_upd > 1:
            drive = g * mean_meas[:-1] + walk[:-1]
            phi[1:], _ = lfilter([1.0], [1.0, -a], drive, zi=[a * phi[0]])
    else:
        steps = rng.normal(0.0, walk_sd, n_upd) if walk_sd > 0 else np.zeros(n_upd)
        phi = np.concatenate(([0.0], np.cumsum(steps[:-1])))
    if local.edge_sigma_fs > 0:
        phi = phi + rng.normal(0.0, local.edge_sigma_fs, n_upd)
    return ClockPhaseSeries(times, phi)


@numba.njit(cache=True)
def _ar1_sample(steps, a, q, z, x0):
    out = np.empty(steps.size)
    x = x0
    for i in range(steps.size):
        d = steps[i]
        if d > 0:
            if a == 1.0:
                var = q * d
                x = x + math.sqrt(var) * z[i]
            else:
                ad = a**d
                var = q * (1.0 - ad * ad) / (1.0 - a * a)
                x = ad * x + math.sqrt(var) * z[i]
        out[i] = x
    return out


@dataclass
class NodeClock:
    """Phase of one end-node clock, sampled at increasing edge indices.

    ``delay_fs`` and ``drift`` describe the fiber carrying the clock light,
    so a locked clock follows the fiber's length changes. ``tx`` supplies
    the transmit-side per-edge jitter seen by the receiver.
    """

    sync: SyncConfig
    local: OscillatorConfig
    delay_fs: int = 0
    drift: DriftModel = field(default_factory=DriftModel)
    drift_seed: int = 0
    tx: OscillatorConfig | None = None
    seed: int = 0

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)
        self._last = None  # last evaluated update index
        self._x = 0.0
        g = self.sync.loop_gain
        m = self.sync.averaging_edges
        tx_sigma = self.tx.edge_sigma_fs if self.tx is not None else 0.0
        if self.sync.enabled:
            self._unit = m
            self._a = 1.0 - g
            meas_var = (self.sync.rec_sigma_fs**2 + tx_sigma**2) / m
            self._q = g * g * meas_var + self.local.walk_var_per_edge() * m
        else:
            self._unit = 1
            self._a = 1.0
            self._q = self.local.walk_var_per_edge()

    @property
    def period_fs(self) -> int:
        return self.local.period_fs

    def residual_sigma(self) -> float:
        if not self.sync.enabled:
            return float("nan")
        a = self._a
        return math.sqrt(self._q / (1.0 - a * a)) if a < 1.0 else float("inf")

    def target_fs(self, edge_index) -> np.ndarray:
        k = np.asarray(edge_index, dtype=np.int64)
        t_s = k.astype(np.float64) * (self.period_fs / FS_PER_S)
        return self.delay_fs + drift_at(t_s, self.drift, self.drift_seed).astype(np.float64)

    def phase_at(self, edge_index) -> np.ndarray:
        """Local clock phase (fs, relative to the central timebase) at the
        given non-decreasing edge indices. State carries across calls."""
        k = np.asarray(edge_index, dtype=np.int64)
        if k.size == 0:
            return np.empty(0)
        if np.any(np.diff(k) < 0):
            raise ValueError("edge indices must be non-decreasing")
        u = k // self._unit
        if self._last is None:
            if self.sync.enabled:
                # lock assumed acquired before the run: stationary start
                self._x = self._rng.normal(0.0, self.residual_sigma()) if self._q > 0 else 0.0
            self._last = int(u[0])
        if u[0] < self._last:
            raise ValueError("edge indices must not go back in time")
        steps = np.diff(np.concatenate(([self._last], u)))
        z = self._rng.standard_normal(k.size)
        x = _ar1_sample(steps.astype(np.int64), self._a, self._q, z, self._x)
        self._x = float(x[-1])
        self._last = int(u[-1])
        if self.local.edge_sigma_fs > 0:
            x = x + self._rng.normal(0.0, self.local.edge_sigma_fs, k.size)
        if self.sync.enabled:
            return self.target_fs(k) + x
        return x


def simulate_clock_phase(clock: NodeClock, duration_s: float, sample_every_edges: int) -> ClockPhaseSeries:
    """Sample a node clock on a regular edge grid over ``duration_s``."""
    period = clock.period_fs
    n_edges = int(duration_s * FS_PER_S // period)
    k = np.arange(0, n_edges, sample_every_edges, dtype=np.int64)
    return ClockPhaseSeries(k * (period / FS_PER_S), clock.phase_at(k))


def rx_offset_series(a: ClockPhaseSeries, b: ClockPhaseSeries) -> ClockPhaseSeries:
    """``a - b`` on a's samples inside the common range, pairing each with
    the nearest sample of ``b``."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("series do not overlap")
    lo = max(a.time_s[0], b.time_s[0])
    hi = min(a.time_s[-1], b.time_s[-1])
    if lo > hi:
        raise ValueError("series do not overlap")
    sel = (a.time_s >= lo) & (a.time_s <= hi)
    ta = a.time_s[sel]
    i = np.searchsorted(b.time_s, ta)
    i = np.clip(i, 1, b.time_s.size - 1) if b.time_s.size > 1 else np.zeros_like(i)
    if b.time_s.size > 1:
        left_closer = (ta - b.time_s[i - 1]) <= (b.time_s[i] - ta)
        i = np.where(left_closer, i - 1, i)
    return ClockPhaseSeries(ta, a.offset_fs[sel] - b.offset_fs[i])
