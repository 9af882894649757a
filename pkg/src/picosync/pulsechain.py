"""Sampled-waveform model of the pulse-shaping electronics.

Stages: comparator, Picoshort (comparator -> complementary copies -> two
programmable delays -> AND gate), Picoamp (band-limited linear gain) and the
Mach-Zehnder modulator transfer. Differential signals are carried as their
single-ended difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal, stats

FS_PER_PS = 1000
DEFAULT_DT_FS = 500
# 10-90 % of a linear edge is 80 % of its full 0-100 % duration
_EDGE_10_90 = 0.8


class PulseError(ValueError):
    pass


@dataclass
class Waveform:
    dt_fs: float
    samples: np.ndarray
    t0_fs: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not self.dt_fs > 0:
            raise PulseError("dt_fs must be positive")
        if self.samples.ndim != 1 or self.samples.size < 2:
            raise PulseError("waveform needs at least 2 samples")
        if not np.all(np.isfinite(self.samples)):
            raise PulseError("waveform samples must be finite")

    @property
    def times_fs(self) -> np.ndarray:
        return self.t0_fs + self.dt_fs * np.arange(self.samples.size)

    def with_samples(self, samples) -> "Waveform":
        return Waveform(self.dt_fs, samples, self.t0_fs)

    def __add__(self, other: "Waveform") -> "Waveform":
        return self.with_samples(self.samples + other.samples)

    def __mul__(self, k: float) -> "Waveform":
        return self.with_samples(self.samples * k)

    __rmul__ = __mul__


def time_grid(t_start_fs: float, t_stop_fs: float, dt_fs: float = DEFAULT_DT_FS) -> np.ndarray:
    return t_start_fs + dt_fs * np.arange(int(round((t_stop_fs - t_start_fs) / dt_fs)))


def rect_pulse(t_fs, start_fs, width_fs, amplitude=1.0, edge_fs=0.0) -> np.ndarray:
    """Rectangle with linear edges of full (0-100 %) duration ``edge_fs``,
    centred on the nominal edge times."""
    return amplitude * (_ramp(t_fs, start_fs, edge_fs) - _ramp(t_fs, start_fs + width_fs, edge_fs))


def gaussian_pulse(t_fs, center_fs, fwhm_fs, amplitude=1.0) -> np.ndarray:
    s = fwhm_fs / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    return amplitude * np.exp(-0.5 * ((np.asarray(t_fs) - center_fs) / s) ** 2)


def _ramp(t, t_edge, full_fs):
    t = np.asarray(t, dtype=np.float64)
    if full_fs <= 0:
        return (t >= t_edge).astype(np.float64)
    return np.clip((t - t_edge) / full_fs + 0.5, 0.0, 1.0)


def threshold_crossings(w: Waveform, threshold: float):
    """Sub-sample threshold crossings as ``(times_fs, rising, initial_high)``."""
    y = w.samples
    above = y > threshold
    idx = np.flatnonzero(above[1:] != above[:-1])
    y0, y1 = y[idx], y[idx + 1]
    frac = (threshold - y0) / (y1 - y0)
    times = w.t0_fs + w.dt_fs * (idx + frac)
    return times, above[idx + 1], bool(above[0])


def _render_edges(w: Waveform, times, rising, initial_high, high, edge_fs) -> Waveform:
    t = w.times_fs
    full = edge_fs / _EDGE_10_90
    level = np.full(t.size, 1.0 if initial_high else 0.0)
    for te, up in zip(times, rising):
        r = _ramp(t, te, full)
        level += r if up else -r
    return w.with_samples(high * level)


def comparator(w: Waveform, threshold_v: float, out_high_v: float, edge_time_fs: float) -> Waveform:
    """Digitise ``w`` at ``threshold_v``: ``out_high_v`` above, 0 below.

    Edges are linear with a 10-90 % time of ``edge_time_fs`` and centred on
    the interpolated crossing, so re-digitising an output at half its level
    returns the same waveform.
    """
    times, rising, init = threshold_crossings(w, threshold_v)
    return _render_edges(w, times, rising, init, out_high_v, edge_time_fs)


@dataclass(frozen=True)
class PicoshortConfig:
    threshold_v: float = 0.4
    delay_a_fs: int = 0
    delay_b_fs: int = 3_000
    edge_time_fs: float = 10_000.0
    out_high_v: float = 0.569  # 270 mV + 299 mV differential swing
    delay_step_fs: int = 3_000
    delay_max_fs: int = 100_000

    def __post_init__(self):
        if not self.edge_time_fs > 0:
            raise PulseError("edge_time_fs must be positive")
        for name in ("delay_a_fs", "delay_b_fs"):
            d = getattr(self, name)
            if not 0 <= d <= self.delay_max_fs:
                raise PulseError(f"delay {d} fs outside [0, {self.delay_max_fs}] fs")
            # programmable lines only take whole steps
            q = int(round(d / self.delay_step_fs)) * self.delay_step_fs
            if q > self.delay_max_fs:
                q -= self.delay_step_fs
            object.__setattr__(self, name, q)

    @property
    def min_pulse_fs(self) -> float:
        """Shortest pulse the AND gate can output: one full rise plus one
        full fall of its linear edges."""
        return 2.0 * self.edge_time_fs / _EDGE_10_90

    def with_delays(self, delay_a_fs: int, delay_b_fs: int) -> "PicoshortConfig":
        return PicoshortConfig(
            self.threshold_v, delay_a_fs, delay_b_fs, self.edge_time_fs,
            self.out_high_v, self.delay_step_fs, self.delay_max_fs,
        )


def _high_intervals(times, rising, initial_high, lo, hi):
    out = []
    start = lo if initial_high else None
    for te, up in zip(times, rising):
        if up and start is None:
            start = te
        elif not up and start is not None:
            out.append((start, te))
            start = None
    if start is not None:
        out.append((start, hi))
    return out


def _intersect(a, b):
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            out.append((lo, hi))
        if a[i][1] < b[j][1]:
            i += 1
        else:
            j += 1
    return out


def picoshort(input_w: Waveform, cfg: PicoshortConfig) -> Waveform:
    """Shorten a logic pulse to roughly ``|delay_b - delay_a|``.

    The input is digitised, split into a true and an inverted copy, each
    copy is delayed, and the AND of the two is emitted. Overlaps shorter than
    the gate's minimum pulse are stretched to that minimum; a zero overlap
    gives no output.
    """
    times, rising, init = threshold_crossings(input_w, cfg.threshold_v)
    if times.size == 0:
        raise PulseError("no edge")
    lo, hi = -math.inf, math.inf
    pos = [(s + cfg.delay_a_fs, e + cfg.delay_a_fs) for s, e in _high_intervals(times, rising, init, lo, hi)]
    neg = [
        (s + cfg.delay_b_fs, e + cfg.delay_b_fs)
        for s, e in _high_intervals(times, ~np.asarray(rising), not init, lo, hi)
    ]
    pulses = []
    for s, e in _intersect(pos, neg):
        if e - s > 0:
            pulses.append((s, max(e, s + cfg.min_pulse_fs)))
    t = input_w.times_fs
    full = cfg.edge_time_fs / _EDGE_10_90
    y = np.zeros(t.size)
    for s, e in pulses:
        if math.isinf(s) or math.isinf(e):
            continue
        y += _ramp(t, s, full) - _ramp(t, e, full)
    return input_w.with_samples(cfg.out_high_v * y)


@dataclass(frozen=True)
class PicoampConfig:
    gain_db_lowfreq: float = 30.0
    bandwidth_3db_hz: float = 10e9
    filter_order: int = 1
    resonance_hz: float | None = None
    resonance_q: float = 5.0

    def __post_init__(self):
        if not self.gain_db_lowfreq >= 0:
            raise PulseError("gain must be >= 0 dB")
        if not self.bandwidth_3db_hz > 0:
            raise PulseError("bandwidth must be positive")
        if self.filter_order < 1:
            raise PulseError("filter_order must be >= 1")

    @property
    def gain(self) -> float:
        return 10.0 ** (self.gain_db_lowfreq / 20.0)

    @property
    def pole_tau_fs(self) -> float:
        """Time constant of each of the cascaded identical poles."""
        n = self.filter_order
        f_pole = self.bandwidth_3db_hz / math.sqrt(2.0 ** (1.0 / n) - 1.0)
        return 1e15 / (2.0 * math.pi * f_pole)


def lowpass_kernel(dt_fs: float, order: int, tau_fs: float, tail: float = 1e-13) -> np.ndarray:
    """Step-invariant discrete impulse response of ``order`` cascaded poles,
    normalised to unit DC gain."""
    dist = stats.gamma(order, scale=tau_fs)
    n = int(math.ceil(dist.isf(tail) / dt_fs)) + 1
    edges = dt_fs * np.arange(n + 1)
    h = np.diff(dist.cdf(edges))
    return h / h.sum()


def lti_lowpass(w: Waveform, gain: float, bandwidth_hz: float, order: int = 1) -> Waveform:
    if math.isinf(bandwidth_hz):
        return w.with_samples(gain * w.samples)
    nyquist_hz = 1e15 / (2.0 * w.dt_fs)
    if nyquist_hz <= 3.0 * bandwidth_hz:
        raise PulseError(
            f"sample spacing {w.dt_fs} fs too coarse: Nyquist {nyquist_hz:.3g} Hz <= 3 x bandwidth"
        )
    n = order
    tau = 1e15 / (2.0 * math.pi * bandwidth_hz / math.sqrt(2.0 ** (1.0 / n) - 1.0))
    h = lowpass_kernel(w.dt_fs, order, tau)
    x = w.samples
    # input held at its first value before t0, so a DC input has no start-up transient
    padded = np.concatenate((np.full(h.size - 1, x[0]), x))
    y = signal.fftconvolve(padded, h, mode="valid")
    return w.with_samples(gain * y)


def picoamp(w: Waveform, cfg: PicoampConfig) -> Waveform:
    """Linear amplifier: low-frequency gain with a low-pass of the given
    order, and an optional notch for a board resonance."""
    out = lti_lowpass(w, cfg.gain, cfg.bandwidth_3db_hz, cfg.filter_order)
    if cfg.resonance_hz is not None:
        fs = 1e15 / w.dt_fs
        b, a = signal.iirnotch(cfg.resonance_hz, cfg.resonance_q, fs=fs)
        out = out.with_samples(signal.lfilter(b, a, out.samples))
    return out


def gain_db_for_peak(w: Waveform, cfg: PicoampConfig, target_peak_v: float) -> float:
    """Low-frequency gain that brings the amplified peak to ``target_peak_v``."""
    unit = picoamp(w, PicoampConfig(0.0, cfg.bandwidth_3db_hz, cfg.filter_order, cfg.resonance_hz, cfg.resonance_q))
    peak = np.max(np.abs(unit.samples))
    if peak == 0:
        raise PulseError("no pulse")
    return 20.0 * math.log10(target_peak_v / peak)


@dataclass(frozen=True)
class MzmConfig:
    v_pi: float = 4.0
    bias: float = 0.0
    static_extinction_db: float = 28.0
    input_power_mw: float = 1.0
    bandwidth_hz: float | None = None

    def __post_init__(self):
        if not self.v_pi > 0:
            raise PulseError("v_pi must be positive")
        if not self.static_extinction_db > 0:
            raise PulseError("static_extinction_db must be positive")

    @property
    def epsilon(self) -> float:
        return 10.0 ** (-self.static_extinction_db / 10.0)


def mzm_transfer(v: Waveform, cfg: MzmConfig) -> Waveform:
    """Optical power out of the modulator for drive voltage ``v``."""
    drive = v
    if cfg.bandwidth_hz is not None:
        drive = lti_lowpass(v, 1.0, cfg.bandwidth_hz, 1)
    eps = cfg.epsilon
    phase = np.pi * (drive.samples + cfg.bias) / (2.0 * cfg.v_pi)
    return v.with_samples(cfg.input_power_mw * ((1.0 - eps) * np.sin(phase) ** 2 + eps))


def _half_crossings(t, y, ipk, half):
    i = ipk
    while i > 0 and y[i] >= half:
        i -= 1
    j = ipk
    while j < y.size - 1 and y[j] >= half:
        j += 1
    if y[i] >= half or y[j] >= half:
        raise PulseError("pulse runs off the waveform edge")
    tl = t[i] + (half - y[i]) / (y[i + 1] - y[i]) * (t[i + 1] - t[i])
    tr = t[j - 1] + (half - y[j - 1]) / (y[j] - y[j - 1]) * (t[j] - t[j - 1])
    return tl, tr


def _pulse_metrics(w: Waveform):
    y = w.samples
    t = w.times_fs
    ipk = int(np.argmax(y))
    base = float(np.median(y))
    if y[ipk] - base <= 1e-12 * max(abs(y[ipk]), 1e-300):
        raise PulseError("no pulse")
    tl, tr = _half_crossings(t, y, ipk, base + 0.5 * (y[ipk] - base))
    width = tr - tl
    outside = np.abs(t - t[ipk]) > 3.0 * width
    if outside.sum() >= 2:
        base = float(np.median(y[outside]))
        tl, tr = _half_crossings(t, y, ipk, base + 0.5 * (y[ipk] - base))
        width = tr - tl
        outside = np.abs(t - t[ipk]) > 3.0 * width
    return width, float(y[ipk]), base, outside


def fwhm(w: Waveform) -> float:
    """Full width at half maximum above baseline, in fs.

    The baseline is the median of samples further than 3 FWHM from the peak.
    """
    return _pulse_metrics(w)[0]


def extinction_db(w: Waveform) -> float:
    width, peak, _, outside = _pulse_metrics(w)
    if outside.sum() < 2:
        raise PulseError("waveform too short to estimate a baseline")
    base = float(np.median(w.samples[outside]))
    if base <= 0:
        return math.inf
    return 10.0 * math.log10(peak / base)


def anyclock_pulse(
    width_fs: float = 2_500_000.0,
    amplitude_v: float = 0.8,
    edge_fs: float = 100_000.0,
    dt_fs: float = DEFAULT_DT_FS,
    pre_fs: float = 500_000.0,
    post_fs: float = 500_000.0,
) -> Waveform:
    """Oscillator-like logic pulse with linear 10-90 % edges."""
    t = time_grid(-pre_fs, width_fs + post_fs, dt_fs)
    return Waveform(dt_fs, rect_pulse(t, 0.0, width_fs, amplitude_v, edge_fs / _EDGE_10_90), t[0])


@dataclass(frozen=True)
class ChainConfig:
    picoshort: PicoshortConfig = field(default_factory=PicoshortConfig)
    picoamp: PicoampConfig = field(default_factory=PicoampConfig)
    mzm: MzmConfig = field(default_factory=lambda: MzmConfig(bandwidth_hz=20e9))
    drive_peak_v: float | None = 3.76
    window_fs: float = 600_000.0


def run_chain(cfg: ChainConfig = ChainConfig(), source: Waveform | None = None) -> dict[str, Waveform]:
    """Oscillator pulse through Picoshort, Picoamp and the MZM.

    The Picoamp gain is set so the drive peak equals ``drive_peak_v`` when
    that is given (the operator trims gain for the MZM), otherwise the
    configured gain is used. Stages are cropped to a window around the
    shortened pulse.
    """
    src = source if source is not None else anyclock_pulse()
    short = picoshort(src, cfg.picoshort)
    ipk = int(np.argmax(short.samples))
    t_pk = short.times_fs[ipk]
    t = short.times_fs
    sel = (t >= t_pk - cfg.window_fs / 3) & (t < t_pk + 2 * cfg.window_fs / 3)
    short_c = Waveform(short.dt_fs, short.samples[sel], t[sel][0])
    amp_cfg = cfg.picoamp
    if cfg.drive_peak_v is not None:
        g = gain_db_for_peak(short_c, amp_cfg, cfg.drive_peak_v)
        amp_cfg = PicoampConfig(g, amp_cfg.bandwidth_3db_hz, amp_cfg.filter_order, amp_cfg.resonance_hz, amp_cfg.resonance_q)
    amp = picoamp(short_c, amp_cfg)
    optical = mzm_transfer(amp, cfg.mzm)
    src_c = Waveform(src.dt_fs, src.samples[sel], t[sel][0])
    return {"input": src_c, "picoshort": short_c, "picoamp": amp, "mzm": optical}
