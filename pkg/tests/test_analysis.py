import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picosync.analysis import (
    AnalysisError,
    Histogram,
    StreamingHistogram,
    analytic_car_oracle,
    box_window_fraction,
    calibrate_noise,
    car_from_histogram,
    coincidence_histogram,
    empty_histogram,
    fidelity_visibility,
    gaussian_window_fraction,
    jitter_stats,
    loss_estimate,
    rate_upper_bound_hz,
)
from picosync.detector import make_tags
from picosync.sync import ClockPhaseSeries
from picosync.timebase import from_relative_fs

P = 5_000_000
RANGE = 52_500_000


def _tags(t_fs):
    s, o = from_relative_fs(np.sort(np.asarray(t_fs, dtype=np.int64)), 0, P)
    return make_tags(s, o)


def _brute(t1, t2, h):
    d = (np.asarray(t1)[:, None] - np.asarray(t2)[None, :]).ravel()
    edges = h.t_min_fs + h.bin_width_fs * np.arange(h.n_bins + 1)
    return np.histogram(d, bins=edges)[0]


# --- histogram --------------------------------------------------------------


def test_shift_oracle():
    t1 = np.array([100_000_000, 200_000_000, 300_000_000])
    h = coincidence_histogram(_tags(t1), _tags(t1 + 1_000_000), 10_000, 2_000_000, P)
    k = (-1_000_000 - h.t_min_fs) // h.bin_width_fs
    assert h.counts[k] == 3 and h.counts.sum() == 3


def test_empty_stream():
    h = coincidence_histogram(_tags([]), _tags([5, 6]), 10_000, RANGE, P)
    assert h.counts.sum() == 0 and h.n_pairs_total == 0


def test_uniform_pairing_expectation():
    rng = np.random.default_rng(1)
    n = 10_000
    t1 = rng.integers(0, 10**15, n)
    t2 = rng.integers(0, 10**15, n)
    h = coincidence_histogram(_tags(t1), _tags(t2), 10_000, 25_000_000, P)
    mean = n * n * 2 * 25_000_000 / 1e15
    assert abs(h.counts.sum() - mean) < 3 * math.sqrt(mean)


def test_unsorted_rejected():
    tags = _tags([10, 20])[::-1]
    with pytest.raises(AnalysisError):
        coincidence_histogram(tags, tags, 10_000, RANGE, P)


def test_zero_is_a_bin_edge():
    h = empty_histogram(10_000, RANGE)
    assert (0 - h.t_min_fs) % h.bin_width_fs == 0


times = st.lists(st.integers(0, 400_000_000), max_size=60)


@settings(max_examples=60, deadline=None)
@given(times, times)
def test_histogram_matches_brute_force(t1, t2):
    t1, t2 = sorted(t1), sorted(t2)
    h = coincidence_histogram(_tags(t1), _tags(t2), 1_000_000, 30_000_000, P)
    assert np.array_equal(h.counts, _brute(t1, t2, h))
    assert h.n_pairs_total == h.counts.sum()


@settings(max_examples=40, deadline=None)
@given(times, times, st.integers(0, 400_000_000))
def test_partition_merge_equals_single_pass(t1, t2, cut):
    t1, t2 = np.sort(t1), np.sort(t2)
    whole = coincidence_histogram(_tags(t1), _tags(t2), 1_000_000, 30_000_000, P)
    a = coincidence_histogram(_tags(t1[t1 < cut]), _tags(t2), 1_000_000, 30_000_000, P)
    b = coincidence_histogram(_tags(t1[t1 >= cut]), _tags(t2), 1_000_000, 30_000_000, P)
    merged = a + b
    assert np.array_equal(merged.counts, whole.counts)
    e = empty_histogram(1_000_000, 30_000_000)
    assert np.array_equal(((a + b) + e).counts, (a + (b + e)).counts)


@settings(max_examples=40, deadline=None)
@given(times, times, st.lists(st.integers(0, 400_000_000), min_size=1, max_size=5))
def test_streaming_equals_single_pass(t1, t2, cuts):
    t1, t2 = np.sort(t1), np.sort(t2)
    whole = coincidence_histogram(_tags(t1), _tags(t2), 1_000_000, 30_000_000, P)
    sh = StreamingHistogram(1_000_000, 30_000_000, P)
    prev = -1
    for c in sorted(set(cuts)) + [None]:
        hi = np.inf if c is None else c
        a = t1[(t1 > prev) & (t1 <= hi)]
        b = t2[(t2 > prev) & (t2 <= hi)]
        sh.feed(_tags(a), _tags(b), watermark=None if c is None else c + 1)
        prev = hi
    assert np.array_equal(sh.finalize().counts, whole.counts)


def test_streaming_rejects_late_tags():
    sh = StreamingHistogram(10_000, RANGE, P)
    sh.feed(_tags([100]), _tags([100]), watermark=1_000_000)
    with pytest.raises(AnalysisError):
        sh.feed(_tags([500]), _tags([]))


def test_histogram_csv_roundtrip(tmp_path):
    h = empty_histogram(10_000, 100_000)
    h.counts[3] = 7
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "bin_center_fs,counts"
    r = Histogram.from_csv(tmp_path / "h.csv")
    assert r.t_min_fs == h.t_min_fs and np.array_equal(r.counts, h.counts)


def test_merge_requires_same_binning():
    with pytest.raises(AnalysisError):
        empty_histogram(10_000, 100_000) + empty_histogram(20_000, 100_000)


# --- CAR --------------------------------------------------------------------


def _synthetic(center, accidental, n_peaks=10):
    h = empty_histogram(10_000, RANGE)
    zero = -h.t_min_fs // h.bin_width_fs
    h.counts[zero] = center
    for k in range(1, n_peaks + 1):
        h.counts[zero + k * 500] = accidental
        h.counts[zero - k * 500] = accidental
    return h


def test_car_synthetic_77():
    r = car_from_histogram(_synthetic(7700, 100))
    assert r.car == pytest.approx(77.0)
    assert r.car_sigma == pytest.approx(77 * math.sqrt(1 / 7700 + 1 / 2000))
    assert r.car_sigma == pytest.approx(1.9, abs=0.05)
    assert r.n_accidental_peaks_used == 20 and r.window_fs == 200_000


def test_car_all_equal_is_one():
    assert car_from_histogram(_synthetic(100, 100)).car == pytest.approx(1.0)


def test_car_zero_accidentals_sentinel():
    r = car_from_histogram(_synthetic(50, 0))
    assert math.isinf(r.car) and r.a_is_zero
    assert r.to_dict()["car"] == "inf"


def test_car_insufficient_range():
    h = empty_histogram(10_000, 20_000_000)
    h.counts[h.n_bins // 2] = 5
    with pytest.raises(AnalysisError):
        car_from_histogram(h)


def test_car_window_too_narrow():
    with pytest.raises(AnalysisError):
        car_from_histogram(_synthetic(10, 1), window_fs=10_000)


def test_windows_disjoint_and_bounded():
    rng = np.random.default_rng(0)
    h = empty_histogram(10_000, RANGE)
    h.counts[:] = rng.poisson(3, h.n_bins)
    r = car_from_histogram(h)
    assert r.c_counts + r.a_total_counts <= h.counts.sum()
    centers = [r.center_fs] + [r.center_fs + s * k * P for k in range(1, 11) for s in (-1, 1)]
    centers.sort()
    assert min(np.diff(centers)) >= r.window_fs


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**9), st.integers(0, 2**31))
def test_car_invariant_under_global_shift(shift, seed):
    rng = np.random.default_rng(seed)
    n = 3000
    base = np.sort(rng.integers(10**9, 10**12, n))
    t1 = base + rng.normal(0, 30_000, n).astype(np.int64)
    t2 = base + rng.normal(0, 30_000, n).astype(np.int64)
    noise1 = rng.integers(10**9, 10**12, 400)
    noise2 = rng.integers(10**9, 10**12, 400)
    a = np.concatenate((t1, noise1))
    b = np.concatenate((t2, noise2))
    r0 = car_from_histogram(coincidence_histogram(_tags(a), _tags(b), 10_000, RANGE, P))
    r1 = car_from_histogram(coincidence_histogram(_tags(a + shift), _tags(b + shift), 10_000, RANGE, P))
    assert (r0.c_counts, r0.a_total_counts) == (r1.c_counts, r1.a_total_counts)


# --- fidelity / visibility --------------------------------------------------


def test_fidelity_reference_values():
    b42 = fidelity_visibility(42)
    assert b42.fidelity == pytest.approx(0.9767, abs=1e-4)
    assert b42.visibility == pytest.approx(0.9535, abs=1e-4)
    assert b42.passes_classical and b42.passes_werner and b42.passes_nonlocality
    assert fidelity_visibility(77).fidelity == pytest.approx(0.9872, abs=1e-4)
    b1 = fidelity_visibility(1.0)
    assert b1.visibility == 0 and b1.fidelity == 0.5
    assert not (b1.passes_classical or b1.passes_werner or b1.passes_nonlocality)


@given(st.floats(1e-6, 1e9))
def test_visibility_is_two_fidelity_minus_one(car):
    b = fidelity_visibility(car)
    assert abs(b.visibility - (2 * b.fidelity - 1)) < 1e-12


def test_fidelity_requires_positive():
    with pytest.raises(AnalysisError):
        fidelity_visibility(0.0)


# --- loss, jitter, bound ----------------------------------------------------


def test_loss_estimate():
    assert loss_estimate(5.0, 5.0) == 0.0
    assert loss_estimate(10**-2.6 * 1e4, 1e4) == pytest.approx(26.0)
    with pytest.raises(AnalysisError, match="nonphysical"):
        loss_estimate(2.0, 1.0)
    with pytest.raises(AnalysisError):
        loss_estimate(0.0, 1.0)


def _series(y, dt=1e-3):
    return ClockPhaseSeries(np.arange(len(y)) * dt, y)


def test_jitter_constant():
    s = jitter_stats(_series(np.full(1000, 42.0)), 0.1)
    assert s["stdev_fs"] == 0 and s["peak_to_peak_fs"] == 0 and s["drift_fs_over_span"] == 0


def test_jitter_white_noise():
    y = np.random.default_rng(3).normal(0, 2000, 60_000)
    assert jitter_stats(_series(y), 1.0)["stdev_fs"] == pytest.approx(2000, rel=0.1)


def test_jitter_drift_recovery():
    t = np.arange(200_000) * 1e-3
    y = 5000 * np.sin(np.pi * t / t[-1]) + np.random.default_rng(4).normal(0, 2000, t.size)
    s = jitter_stats(ClockPhaseSeries(t, y), 1.0)
    assert s["drift_fs_over_span"] == pytest.approx(5000, abs=600)


def test_jitter_too_few_samples():
    with pytest.raises(AnalysisError):
        jitter_stats(_series(np.zeros(9)), 1.0)


def test_rate_bound_default_guard():
    assert rate_upper_bound_hz(2000.0) == pytest.approx(300e6)
    assert rate_upper_bound_hz(2000.0, guard=1000.0) == pytest.approx(500e6)


# --- closed-form model ------------------------------------------------------


def test_oracle_noiseless_unit_efficiency():
    assert analytic_car_oracle(0.01, 1, 1, 0, 0, 1.0) == pytest.approx(101.0)


def test_oracle_testbed_losses():
    car = analytic_car_oracle(0.01, 10**-2.4, 10**-2.6, 0, 0, 0.9)
    assert car == pytest.approx(91.0, rel=1e-12)


def test_oracle_no_accidentals():
    assert math.isinf(analytic_car_oracle(0.0, 0.1, 0.1, 0.0, 1e-3, 1.0))


def test_oracle_default_fractions_reduce_to_plain_form():
    mu, e1, e2, n1, n2, f = 0.02, 0.1, 0.05, 1e-4, 3e-4, 0.95
    s1, s2 = mu * e1 + n1, mu * e2 + n2
    assert analytic_car_oracle(mu, e1, e2, n1, n2, f) == pytest.approx((f * mu * e1 * e2 + s1 * s2) / (s1 * s2), rel=1e-14)


def test_oracle_monotone_in_noise():
    grid = np.logspace(-8, -2, 40)
    for mu in (0.005, 0.01, 0.02):
        c1 = [analytic_car_oracle(mu, 0.1, 0.1, n, 1e-5, 0.99) for n in grid]
        c2 = [analytic_car_oracle(mu, 0.1, 0.1, 1e-5, n, 0.99) for n in grid]
        assert np.all(np.diff(c1) < 0) and np.all(np.diff(c2) < 0)


def test_calibration_closure():
    n = calibrate_noise(42.0, 0.01, 10**-2.4, 10**-2.6, 0.99)
    assert analytic_car_oracle(0.01, 10**-2.4, 10**-2.6, n, n, 0.99) == pytest.approx(42.0, abs=1e-6)


def test_calibration_unreachable():
    with pytest.raises(AnalysisError):
        calibrate_noise(500.0, 0.01, 0.1, 0.1, 1.0)


def test_gaussian_window_fraction():
    assert gaussian_window_fraction(200_000, 100_000 / 1.959964) == pytest.approx(0.95, abs=1e-6)
    assert gaussian_window_fraction(200_000, 0.0) == 1.0


def test_box_window_fraction():
    # two boxes spanning the full period: uniform difference
    assert box_window_fraction(200_000, P, P, P) == pytest.approx(200_000 / P, rel=1e-12)
    rng = np.random.default_rng(5)
    g = 2_500_000
    d = rng.uniform(-g / 2, g / 2, 10**6) - rng.uniform(-g / 2, g / 2, 10**6)
    mc = np.mean(np.abs(d) < 100_000)
    assert box_window_fraction(200_000, g, g, P) == pytest.approx(mc, abs=3 * math.sqrt(mc / 1e6))
