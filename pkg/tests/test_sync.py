import math

import numpy as np
import pytest

from picosync.channel import DriftModel
from picosync.sync import (
    ClockPhaseSeries,
    NodeClock,
    OscillatorConfig,
    SyncConfig,
    SyncError,
    emit_clock_edges,
    lock_phase,
    ramp_lag_fs,
    residual_sigma_fs,
    rx_offset_series,
    simulate_clock_phase,
)
from picosync.source import ConfigError
from picosync.timebase import normalize_arrays

P = 5_000_000
FWHM = 2.0 * math.sqrt(2.0 * math.log(2.0))


def _abs(s, o):
    return s.astype(np.int64) * P + o


def test_ideal_edges():
    s, o = emit_clock_edges(1000, OscillatorConfig(), seed=0)
    assert np.array_equal(_abs(s, o), np.arange(1000) * P)


def test_edge_jitter():
    s, o = emit_clock_edges(10**5, OscillatorConfig(edge_jitter_fwhm_fs=1000), seed=1)
    sd = np.diff(_abs(s, o)).std()
    assert abs(sd / (math.sqrt(2) * 1000 / FWHM) - 1) < 0.05


def test_no_edges():
    s, o = emit_clock_edges(0, OscillatorConfig(), seed=0)
    assert s.size == 0


def _received(n, delay_fs, seed=0, jitter=0.0):
    s, o = emit_clock_edges(n, OscillatorConfig(edge_jitter_fwhm_fs=jitter), seed=seed)
    return normalize_arrays(s, o + delay_fs, P)


def test_noiseless_lock_converges():
    delay = 1_234_567
    s, o = _received(5000, delay)
    g = 0.01
    series = lock_phase(s, o, SyncConfig(loop_gain=g), OscillatorConfig(), seed=0)
    late = series.offset_fs[int(10 / g):]
    assert np.all(np.abs(late - delay) < 1.0)


@pytest.mark.parametrize("gain", [0.003, 0.01, 0.03, 0.1])
def test_residual_matches_first_order_formula(gain):
    cfg = SyncConfig(rec_jitter_fwhm_fs=20_000 * FWHM, loop_gain=gain)
    s, o = _received(400_000, 777_000)
    series = lock_phase(s, o, cfg, OscillatorConfig(), seed=3)
    res = series.offset_fs[int(20 / gain):] - 777_000
    expect = residual_sigma_fs(cfg)
    assert abs(res.std() / expect - 1) < 0.15
    # stationary noise: zero mean
    n_eff = res.size * gain / 2
    assert abs(res.mean()) < 3 * expect / math.sqrt(n_eff)


def test_residual_formula_value():
    cfg = SyncConfig(rec_jitter_fwhm_fs=20_000 * FWHM, loop_gain=0.01)
    assert residual_sigma_fs(cfg) == pytest.approx(20_000 * math.sqrt(0.01 / 1.99), rel=1e-9)


def test_averaging_edges_reduce_residual():
    cfg = SyncConfig(rec_jitter_fwhm_fs=20_000 * FWHM, loop_gain=0.05, averaging_edges=4)
    s, o = _received(400_000, 0)
    res = lock_phase(s, o, cfg, OscillatorConfig(), seed=4).offset_fs[400:]
    assert abs(res.std() / residual_sigma_fs(cfg) - 1) < 0.15


def test_ramp_lag_at_testbed_values():
    ramp = 5000.0 / (7 * 3600)  # 5 ps over 7 h
    assert ramp_lag_fs(ramp, 0.01, 200e6) < 0.01


def test_ramp_lag_observed():
    g, ramp_per_edge = 0.05, 3.0  # fs per edge
    n = 4000
    k = np.arange(n)
    t = k * P + np.rint(k * ramp_per_edge).astype(np.int64)
    series = lock_phase(*normalize_arrays(np.zeros(n, np.int64), t, P), SyncConfig(loop_gain=g), OscillatorConfig(), seed=0)
    lag = (k * ramp_per_edge - series.offset_fs)[-500:].mean()
    assert lag == pytest.approx(ramp_lag_fs(ramp_per_edge * 200e6, g, 200e6), rel=0.02)


def test_empty_input():
    with pytest.raises(SyncError, match="no clock received"):
        lock_phase(np.empty(0, np.uint64), np.empty(0, np.int64), SyncConfig(), OscillatorConfig(), seed=0)
    off = lock_phase(np.empty(0, np.uint64), np.empty(0, np.int64), SyncConfig(enabled=False), OscillatorConfig(), seed=0)
    assert len(off) == 0


def test_free_running_walk_variance_linear():
    walk = 1e5  # fs / sqrt(s)
    osc = OscillatorConfig(phase_walk_fs_per_sqrt_s=walk)
    n_runs, n_edges = 300, 20_000
    s, o = _received(n_edges, 0)
    finals = np.array(
        [lock_phase(s, o, SyncConfig(enabled=False), osc, seed=i).offset_fs[[4999, -1]] for i in range(n_runs)]
    )
    rate = osc.walk_var_per_edge()
    for col, steps in ((0, 4999), (1, n_edges - 1)):
        v = finals[:, col].var()
        expect = rate * steps
        assert abs(v / expect - 1) < 3 * math.sqrt(2 / n_runs)


def test_node_clock_matches_edge_loop():
    # two evaluation routes of the same loop
    cfg = SyncConfig(rec_jitter_fwhm_fs=20_000 * FWHM, loop_gain=0.02)
    clock = NodeClock(cfg, OscillatorConfig(), delay_fs=500_000, seed=5)
    k = np.arange(0, 2_000_000, 7)
    x = clock.phase_at(k) - 500_000
    assert x.std() == pytest.approx(residual_sigma_fs(cfg), rel=0.05)
    s, o = _received(200_000, 500_000)
    y = lock_phase(s, o, cfg, OscillatorConfig(), seed=6).offset_fs[1000:] - 500_000
    assert x.std() == pytest.approx(y.std(), rel=0.08)
    lag1 = np.corrcoef(x[:-1], x[1:])[0, 1]
    assert lag1 == pytest.approx((1 - 0.02) ** 7, abs=0.02)


def test_node_clock_rejects_going_back():
    clock = NodeClock(SyncConfig(), OscillatorConfig())
    clock.phase_at([10, 20])
    with pytest.raises(ValueError):
        clock.phase_at([5])


def test_node_clock_tracks_drift():
    m = DriftModel(kind="sinusoid", amplitude_fs=5000, period_s=1.0)
    clock = NodeClock(SyncConfig(loop_gain=0.01), OscillatorConfig(), delay_fs=100, drift=m)
    k = np.array([50_000_000])  # t = 0.25 s
    assert clock.phase_at(k)[0] == pytest.approx(5100.0, abs=1e-6)


def test_rx_offset_identity_and_drift():
    t = np.linspace(0, 1, 1001)
    a = ClockPhaseSeries(t, 5000 * np.sin(np.pi * t))
    b = ClockPhaseSeries(t, np.zeros_like(t))
    assert np.all(rx_offset_series(b, b).offset_fs == 0)
    off = rx_offset_series(a, b)
    assert np.ptp(off.offset_fs) == pytest.approx(5000, abs=500)


def test_rx_offset_nearest_pairing():
    a = ClockPhaseSeries([0.0, 1.0, 2.0], [10.0, 20.0, 30.0])
    b = ClockPhaseSeries([0.1, 0.9, 2.2], [1.0, 2.0, 3.0])
    out = rx_offset_series(a, b)
    assert out.time_s.tolist() == [1.0, 2.0]
    assert out.offset_fs.tolist() == [18.0, 27.0]


def test_rx_offset_disjoint():
    a = ClockPhaseSeries([0.0, 1.0], [0.0, 0.0])
    b = ClockPhaseSeries([2.0, 3.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        rx_offset_series(a, b)


def test_series_csv_roundtrip(tmp_path):
    s = ClockPhaseSeries([0.0, 0.5, 1.25], [1.5, -2.0, 3.0])
    s.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "time_s,offset_fs"
    r = ClockPhaseSeries.from_csv(tmp_path / "c.csv")
    assert np.array_equal(r.time_s, s.time_s) and np.array_equal(r.offset_fs, s.offset_fs)


def test_series_must_increase():
    with pytest.raises(ValueError):
        ClockPhaseSeries([0.0, 0.0], [1.0, 2.0])


def test_simulate_clock_phase_grid():
    clock = NodeClock(SyncConfig(rec_jitter_fwhm_fs=1000), OscillatorConfig(), seed=1)
    s = simulate_clock_phase(clock, 1e-3, 1000)
    assert len(s) == 200 and s.time_s[1] == pytest.approx(5e-6)


@pytest.mark.parametrize("kwargs", [dict(loop_gain=0.0), dict(loop_gain=1.5), dict(averaging_edges=0)])
def test_invalid_sync(kwargs):
    with pytest.raises(ConfigError):
        SyncConfig(**kwargs)


def test_invalid_oscillator():
    with pytest.raises(ConfigError):
        OscillatorConfig(frequency_hz=0)
