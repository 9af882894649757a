"""Time-tag analysis: coincidence histograms, CAR and its bounds, loss and
clock-jitter statistics, and the closed-form CAR model used to calibrate
noise rates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy import optimize, special

from .timebase import DEFAULT_PERIOD_FS, floor_key, is_sorted_arrays

WERNER_VISIBILITY = 1.0 / 3.0
NONLOCAL_VISIBILITY = 1.0 / math.sqrt(2.0)
CLASSICAL_CAR = 2.0
# 2 ps clock jitter <-> ~300 MHz; the guard is fitted, not derived
DEFAULT_RATE_GUARD = 1.0 / (300e6 * 2e-12)


class AnalysisError(ValueError):
    pass


# --- histogram ------------------------------------------------------------


@dataclass
class Histogram:
    bin_width_fs: int
    t_min_fs: int
    counts: np.ndarray
    n_pairs_total: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.bin_width_fs <= 0:
            raise AnalysisError("bin_width_fs must be positive")

    @property
    def n_bins(self) -> int:
        return self.counts.size

    @property
    def t_max_fs(self) -> int:
        return self.t_min_fs + self.n_bins * self.bin_width_fs

    @property
    def bin_centers_fs(self) -> np.ndarray:
        return self.t_min_fs + self.bin_width_fs * (np.arange(self.n_bins) + 0.5)

    def __add__(self, other: "Histogram") -> "Histogram":
        if (self.bin_width_fs, self.t_min_fs, self.n_bins) != (other.bin_width_fs, other.t_min_fs, other.n_bins):
            raise AnalysisError("histograms have different binning")
        return Histogram(self.bin_width_fs, self.t_min_fs, self.counts + other.counts, self.n_pairs_total + other.n_pairs_total)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center_fs", "counts"])
            for c, n in zip(self.bin_centers_fs, self.counts):
                w.writerow([repr(float(c)), int(n)])

    @classmethod
    def from_csv(cls, path) -> "Histogram":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        centers = data[:, 0]
        width = int(round(centers[1] - centers[0]))
        counts = data[:, 1].astype(np.int64)
        return cls(width, int(round(centers[0] - width / 2)), counts, int(counts.sum()))


def empty_histogram(bin_fs: int, range_fs: int) -> Histogram:
    """Bins of ``bin_fs`` covering ``[-range, range)`` with 0 on a bin edge."""
    half = int(math.ceil(range_fs / bin_fs))
    return Histogram(bin_fs, -half * bin_fs, np.zeros(2 * half, dtype=np.int64), 0)


@numba.njit(cache=True)
def _two_pointer(s1, o1, s2, o2, period, t_min, bin_fs, counts, start1, j_start):
    n_bins = counts.size
    t_max = t_min + n_bins * bin_fs
    limit = (max(abs(t_min), abs(t_max)) // period) + 2
    big = np.int64(1) << 62
    j0 = j_start
    total = 0
    for i in range(start1, s1.size):
        # drop tags2 so early that t1 - t2 >= t_max
        while j0 < s2.size:
            ds = s1[i] - s2[j0]
            if ds > limit:
                d = big
            elif ds < -limit:
                d = -big
            else:
                d = ds * period + (o1[i] - o2[j0])
            if d >= t_max:
                j0 += 1
            else:
                break
        j = j0
        while j < s2.size:
            ds = s1[i] - s2[j]
            if ds < -limit:
                break
            d = ds * period + (o1[i] - o2[j])
            if d < t_min:
                break
            counts[(d - t_min) // bin_fs] += 1
            total += 1
            j += 1
    return total, j0


def _keys(tags, period_fs):
    s, o = floor_key(tags["slot"], tags["offset_fs"], period_fs)
    return np.ascontiguousarray(s, dtype=np.int64), np.ascontiguousarray(o, dtype=np.int64)


def _check_sorted(tags, period_fs):
    if not is_sorted_arrays(tags["slot"], tags["offset_fs"], period_fs):
        raise AnalysisError("tag stream is not sorted")


def coincidence_histogram(tags1, tags2, bin_fs: int = 10_000, range_fs: int = 52_500_000, period_fs: int = DEFAULT_PERIOD_FS) -> Histogram:
    """Histogram of all differences ``t1 - t2`` inside ``[-range, range)``.

    Both streams must be sorted; a two-pointer sweep visits each tag of
    stream 1 once plus its matches.
    """
    _check_sorted(tags1, period_fs)
    _check_sorted(tags2, period_fs)
    h = empty_histogram(bin_fs, range_fs)
    s1, o1 = _keys(tags1, period_fs)
    s2, o2 = _keys(tags2, period_fs)
    total, _ = _two_pointer(s1, o1, s2, o2, np.int64(period_fs), np.int64(h.t_min_fs), np.int64(bin_fs), h.counts, 0, 0)
    h.n_pairs_total = int(total)
    return h


class StreamingHistogram:
    """Coincidence histogram fed with time-ordered chunks of both streams.

    After each :meth:`feed` the caller states a watermark: no later tag on
    either side will be earlier than it. Stream-1 tags whose whole match range
    lies before the watermark are then counted and released, so memory stays
    bounded by the tags inside one range of the watermark.
    """

    def __init__(self, bin_fs: int = 10_000, range_fs: int = 52_500_000, period_fs: int = DEFAULT_PERIOD_FS):
        self.period_fs = period_fs
        self.hist = empty_histogram(bin_fs, range_fs)
        self._a = None
        self._b = None
        self._watermark = None

    @staticmethod
    def _cat(buf, new):
        if buf is None:
            return new.copy()
        return np.concatenate((buf, new))

    def _sorted_after(self, prev, new):
        if prev is not None and prev.size and new.size:
            ps, po = floor_key(prev["slot"][-1:], prev["offset_fs"][-1:], self.period_fs)
            ns, no = floor_key(new["slot"][:1], new["offset_fs"][:1], self.period_fs)
            if (ns[0], no[0]) < (ps[0], po[0]):
                raise AnalysisError("chunk starts before the previous chunk ended")

    def feed(self, tags1, tags2, watermark=None):
        _check_sorted(tags1, self.period_fs)
        _check_sorted(tags2, self.period_fs)
        self._sorted_after(self._a, tags1)
        self._sorted_after(self._b, tags2)
        if self._watermark is not None:
            for tags in (tags1, tags2):
                if tags.size:
                    s, o = floor_key(tags["slot"][:1], tags["offset_fs"][:1], self.period_fs)
                    if (int(s[0]) * self.period_fs + int(o[0])) < self._watermark:
                        raise AnalysisError("tag earlier than a previously declared watermark")
        self._a = self._cat(self._a, tags1)
        self._b = self._cat(self._b, tags2)
        if watermark is not None:
            self._flush(int(watermark))

    def _flush(self, watermark_fs: int | None):
        h = self.hist
        a, b = self._a, self._b
        if a is None or a.size == 0:
            self._trim_b(watermark_fs)
            return
        sa, oa = _keys(a, self.period_fs)
        ta = sa * self.period_fs + oa
        if watermark_fs is None:
            n_ready = a.size
        else:
            # t1 is complete once every t2 with t1 - t2 > t_min has arrived
            n_ready = int(np.searchsorted(ta, watermark_fs + h.t_min_fs, side="left"))
        if n_ready:
            sb, ob = _keys(b, self.period_fs)
            ready = slice(0, n_ready)
            total, _ = _two_pointer(
                sa[ready], oa[ready], sb, ob, np.int64(self.period_fs), np.int64(h.t_min_fs),
                np.int64(h.bin_width_fs), h.counts, 0, 0,
            )
            h.n_pairs_total += int(total)
            self._a = a[n_ready:]
        if watermark_fs is not None:
            self._watermark = watermark_fs
        self._trim_b(watermark_fs)

    def _trim_b(self, watermark_fs):
        if watermark_fs is None or self._b is None or self._b.size == 0:
            return
        # b tags can only match a tags with t1 < t2 + t_max; pending a tags are >= watermark + t_min
        h = self.hist
        earliest_a = watermark_fs + h.t_min_fs
        if self._a is not None and self._a.size:
            s, o = floor_key(self._a["slot"][:1], self._a["offset_fs"][:1], self.period_fs)
            earliest_a = min(earliest_a, int(s[0]) * self.period_fs + int(o[0]))
        sb, ob = _keys(self._b, self.period_fs)
        tb = sb * self.period_fs + ob
        drop = int(np.searchsorted(tb, earliest_a - h.t_max_fs, side="right"))
        self._b = self._b[drop:]

    def finalize(self) -> Histogram:
        self._flush(None)
        return self.hist


# --- CAR ------------------------------------------------------------------


@dataclass
class CarReport:
    c_counts: int
    a_mean_counts: float
    a_total_counts: int
    car: float
    car_sigma: float
    fidelity_bound: float
    visibility_bound: float
    passes_classical: bool
    passes_werner: bool
    passes_nonlocality: bool
    window_fs: int
    n_accidental_peaks_used: int
    center_fs: int
    a_is_zero: bool = False
    accidental_window_counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("car", "car_sigma", "fidelity_bound", "visibility_bound"):
            if not math.isfinite(d[k]):
                d[k] = None if math.isnan(d[k]) else ("inf" if d[k] > 0 else "-inf")
        return d


@dataclass(frozen=True)
class Bounds:
    fidelity: float
    visibility: float
    passes_classical: bool
    passes_werner: bool
    passes_nonlocality: bool


def fidelity_visibility(car: float) -> Bounds:
    """Fidelity ``CAR/(CAR+1)`` and visibility ``(CAR-1)/(CAR+1)`` with the
    classical, Werner and nonlocality verdicts."""
    if not car > 0:
        raise AnalysisError("car must be positive")
    if math.isinf(car):
        fid, vis = 1.0, 1.0
    else:
        fid = car / (car + 1.0)
        vis = (car - 1.0) / (car + 1.0)
    return Bounds(fid, vis, car > CLASSICAL_CAR, vis > WERNER_VISIBILITY, vis > NONLOCAL_VISIBILITY)


def _window_sum(h: Histogram, edge_fs: int, n_bins: int) -> int:
    i0 = (edge_fs - h.t_min_fs) // h.bin_width_fs - n_bins // 2
    if i0 < 0 or i0 + n_bins > h.n_bins:
        raise AnalysisError("histogram range does not cover the requested windows")
    return int(h.counts[i0 : i0 + n_bins].sum())


def _snap(h: Histogram, t_fs: float) -> int:
    return int(h.t_min_fs + round((t_fs - h.t_min_fs) / h.bin_width_fs) * h.bin_width_fs)


def find_center_fs(h: Histogram, period_fs: int = DEFAULT_PERIOD_FS) -> int:
    """Bin edge nearest the coincidence peak: argmax bin within half a
    period of zero, moved to the edge facing its larger neighbour."""
    centers = h.bin_centers_fs
    sel = np.flatnonzero(np.abs(centers) <= period_fs / 2)
    if sel.size == 0:
        raise AnalysisError("histogram does not cover zero delay")
    k = int(sel[np.argmax(h.counts[sel])])
    left = h.counts[k - 1] if k > 0 else -1
    right = h.counts[k + 1] if k + 1 < h.n_bins else -1
    edge = h.t_min_fs + k * h.bin_width_fs
    return int(edge + h.bin_width_fs) if right > left else int(edge)


def car_from_histogram(
    h: Histogram,
    window_fs: int = 200_000,
    period_fs: int = DEFAULT_PERIOD_FS,
    n_peaks: int = 10,
    exclude_center_neighbors: int = 0,
) -> CarReport:
    """CAR = (counts in the window around the central peak) / (mean counts
    in equal windows around the accidental peaks at multiples of the period
    on both sides)."""
    n_bins = int(round(window_fs / h.bin_width_fs))
    if n_bins < 2:
        raise AnalysisError("window must span at least 2 bins")
    if n_bins * h.bin_width_fs > period_fs:
        raise AnalysisError("window wider than the period: windows would overlap")
    center = find_center_fs(h, period_fs)
    c = _window_sum(h, center, n_bins)
    ks = range(exclude_center_neighbors + 1, exclude_center_neighbors + n_peaks + 1)
    acc = []
    for k in ks:
        for sign in (-1, 1):
            acc.append(_window_sum(h, _snap(h, center + sign * k * period_fs), n_bins))
    a_total = int(sum(acc))
    a_mean = a_total / len(acc) if acc else 0.0
    if a_mean > 0:
        car = c / a_mean
        if c > 0:
            sigma = car * math.sqrt(1.0 / c + 1.0 / a_total)
        else:
            sigma = 1.0 / a_mean
    else:
        car, sigma = math.inf, math.inf
    if car > 0:
        b = fidelity_visibility(car)
    else:
        b = Bounds(0.0, -1.0, False, False, False)
    return CarReport(
        c_counts=c,
        a_mean_counts=a_mean,
        a_total_counts=a_total,
        car=car,
        car_sigma=sigma,
        fidelity_bound=b.fidelity,
        visibility_bound=b.visibility,
        passes_classical=b.passes_classical,
        passes_werner=b.passes_werner,
        passes_nonlocality=b.passes_nonlocality,
        window_fs=n_bins * h.bin_width_fs,
        n_accidental_peaks_used=len(acc),
        center_fs=center,
        a_is_zero=a_mean == 0,
        accidental_window_counts=acc,
    )


def loss_estimate(coincidence_rate_hz: float, singles_rate_hz: float) -> float:
    """Heralded loss of the other arm: ``-10 log10(coincidences / singles)``."""
    if not (coincidence_rate_hz > 0 and singles_rate_hz > 0):
        raise AnalysisError("rates must be positive")
    if coincidence_rate_hz > singles_rate_hz:
        raise AnalysisError("nonphysical rates")
    return -10.0 * math.log10(coincidence_rate_hz / singles_rate_hz)


def jitter_stats(series, window_s: float) -> dict:
    """Median stdev over consecutive windows of ``window_s``, raw
    peak-to-peak, and peak-to-peak of the window means (drift)."""
    t = np.asarray(series.time_s)
    y = np.asarray(series.offset_fs)
    if t.size < 10:
        raise AnalysisError("need at least 10 samples")
    idx = np.floor((t - t[0]) / window_s).astype(np.int64)
    bounds = np.flatnonzero(np.diff(idx)) + 1
    groups = np.split(y, bounds)
    groups = [g for g in groups if g.size >= 2]
    if not groups:
        raise AnalysisError("no window holds two samples")
    stdevs = np.array([g.std(ddof=1) for g in groups])
    means = np.array([g.mean() for g in groups])
    return {
        "stdev_fs": float(np.median(stdevs)),
        "peak_to_peak_fs": float(y.max() - y.min()),
        "drift_fs_over_span": float(means.max() - means.min()),
        "n_windows": len(groups),
    }


def rate_upper_bound_hz(timing_sigma_fs: float, guard: float = DEFAULT_RATE_GUARD) -> float:
    """Clock-rate bound ``1 / (guard * sigma)``. The default guard is chosen
    so 2 ps maps to 300 MHz; it is a fit, not a derived margin."""
    if not timing_sigma_fs > 0:
        raise AnalysisError("timing sigma must be positive")
    return 1.0 / (guard * timing_sigma_fs * 1e-15)


# --- closed-form CAR model ---------------------------------------------------


def analytic_car_oracle(
    mu: float,
    eta1: float,
    eta2: float,
    noise_per_slot_1: float,
    noise_per_slot_2: float,
    window_capture_fraction: float,
    *,
    accidental_capture_fraction: float = 1.0,
    signal_noise_fraction: tuple[float, float] = (1.0, 1.0),
    noise_noise_fraction: float = 1.0,
    second_factorial_moment: float | None = None,
) -> float:
    """Expected CAR from per-slot rates.

    With the keyword fractions left at 1 this is the plain model: singles
    ``s_i = mu eta_i + n_i``, accidentals ``A = s1 s2`` and
    ``C = f mu eta1 eta2 + A``. The keywords weight each accidental term by
    the chance that its time difference lands in the window:
    signal-signal (``accidental_capture_fraction``), signal-noise against the
    noise of side i (``signal_noise_fraction[i]``) and noise-noise.
    ``second_factorial_moment`` is E[N(N-1)] of the pair number (Poisson:
    mu**2); any excess over mu**2 adds same-slot multi-pair coincidences to C.
    """
    for v in (mu, eta1, eta2, noise_per_slot_1, noise_per_slot_2, window_capture_fraction):
        if v < 0 or math.isnan(v):
            raise AnalysisError("oracle parameters must be non-negative")
    m2 = mu * mu if second_factorial_moment is None else second_factorial_moment
    ss = accidental_capture_fraction * mu * mu * eta1 * eta2
    sn = mu * eta1 * noise_per_slot_2 * signal_noise_fraction[1] + mu * eta2 * noise_per_slot_1 * signal_noise_fraction[0]
    nn = noise_per_slot_1 * noise_per_slot_2 * noise_noise_fraction
    a = ss + sn + nn
    if a == 0:
        return math.inf
    c = a + window_capture_fraction * mu * eta1 * eta2 + accidental_capture_fraction * eta1 * eta2 * (m2 - mu * mu)
    return c / a


def gaussian_window_fraction(window_fs: float, sigma_fs: float) -> float:
    """Mass of N(0, sigma) inside +-window/2."""
    if sigma_fs <= 0:
        return 1.0
    return float(special.erf(window_fs / 2.0 / (sigma_fs * math.sqrt(2.0))))


def _box_diff_cdf(x, w1, w2):
    """CDF of U1 - U2, U_i uniform on [-w_i/2, w_i/2]."""
    def r(y):
        return np.maximum(y, 0.0) ** 2 / 2.0

    h1, h2 = w1 / 2.0, w2 / 2.0
    return (r(x + h1 + h2) - r(x + h1 - h2) - r(x - h1 + h2) + r(x - h1 - h2)) / (w1 * w2)


def box_window_fraction(window_fs: float, width1_fs: float, width2_fs: float, period_fs: float) -> float:
    """Expected coincidences per slot pair-up between two box-shaped noise
    processes (one event per slot, widths ``width_i``), counted in a window
    at a peak. Neighbouring slots are included, so for two full-period boxes
    this is exactly ``window / period``."""
    w1 = max(width1_fs, 1e-9)
    w2 = max(width2_fs, 1e-9)
    total = 0.0
    reach = int(math.ceil((w1 + w2) / 2.0 / period_fs)) + 1
    for j in range(-reach, reach + 1):
        hi = window_fs / 2.0 - j * period_fs
        lo = -window_fs / 2.0 - j * period_fs
        total += float(_box_diff_cdf(hi, w1, w2) - _box_diff_cdf(lo, w1, w2))
    return total


def calibrate_noise(
    target_car: float,
    mu: float,
    eta1: float,
    eta2: float,
    window_capture_fraction: float,
    ratio: tuple[float, float] = (1.0, 1.0),
    **oracle_kwargs,
) -> float:
    """Noise level ``n`` with ``oracle(n * ratio[0], n * ratio[1]) == target``.

    The oracle falls monotonically in the noise, so a bracketing root finder
    on ``[0, n_hi]`` converges to the unique solution.
    """
    def car(n):
        return analytic_car_oracle(mu, eta1, eta2, n * ratio[0], n * ratio[1], window_capture_fraction, **oracle_kwargs)

    if car(0.0) < target_car:
        raise AnalysisError(f"noiseless CAR {car(0.0):.4g} already below target {target_car}")
    hi = 1e-12
    while car(hi) > target_car:
        hi *= 2.0
        if hi > 1e6:
            raise AnalysisError("could not bracket the target CAR")
    return bisect_decreasing(car, target_car, 0.0, hi)


def bisect_decreasing(fn, target: float, lo: float, hi: float, rtol: float = 1e-13) -> float:
    """Root of ``fn(x) = target`` for ``fn`` decreasing on ``[lo, hi]``."""
    f_lo = fn(lo) - target
    if math.isinf(f_lo):
        lo_try = hi * 1e-12
        f_lo = fn(lo_try) - target
        lo = lo_try
    return optimize.brentq(lambda x: fn(x) - target, lo, hi, xtol=1e-30, rtol=rtol, maxiter=500)
