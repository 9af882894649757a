"""Full two-arm experiment: source -> fibers -> detectors -> node clocks ->
time tags -> coincidence analysis, processed in bounded chunks of slots.

Seeds for every component are split from the master seed as
``sha256(f"{master_seed}:{name}")[:8]``; per-chunk generators are seeded
with ``[component_seed, chunk_index]``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize

from . import __version__
from .analysis import (
    CarReport,
    Histogram,
    StreamingHistogram,
    analytic_car_oracle,
    bisect_decreasing,
    box_window_fraction,
    car_from_histogram,
    gaussian_window_fraction,
    loss_estimate,
)
from .channel import ChannelConfig, propagate, sample_raman
from .config import flatten
from .detector import (
    TAG_DTYPE,
    DetectorConfig,
    TagKind,
    dead_time_filter,
    detect_analog,
    sort_tags,
    tdc_record,
)
from .qtag import TagWriter
from .source import ConfigError, SourceConfig, sample_emissions
from .sync import (
    ClockPhaseSeries,
    NodeClock,
    OscillatorConfig,
    SyncConfig,
    rx_offset_series,
    simulate_clock_phase,
)
from .timebase import FS_PER_S, floor_key, sigma_from_fwhm

OUTPUT_DIR_ENV = "PICOSYNC_OUTPUT_DIR"

# testbed hardware values
TESTBED_LOSS_DB = (24.0, 26.0)
TESTBED_DET_EFFICIENCY = 0.8
TESTBED_DARK_HZ = 100.0
TESTBED_CAR_SYNC_OFF = 77.0
TESTBED_CAR_SYNC_ON = 42.0


def derive_seed(master_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ExperimentConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    channel_1: ChannelConfig = field(default_factory=ChannelConfig)
    channel_2: ChannelConfig = field(default_factory=ChannelConfig)
    detector_1: DetectorConfig = field(default_factory=DetectorConfig)
    detector_2: DetectorConfig = field(default_factory=DetectorConfig)
    sync: SyncConfig = field(default_factory=SyncConfig)
    tx_clock: OscillatorConfig = field(default_factory=OscillatorConfig)
    node_1: OscillatorConfig = field(default_factory=OscillatorConfig)
    node_2: OscillatorConfig = field(default_factory=OscillatorConfig)
    n_slots: int = 10_000_000
    master_seed: int = 1
    output_dir: str = "picosync_run"
    chunk_slots: int = 4_000_000
    bin_fs: int = 10_000
    window_fs: int = 200_000
    n_peaks: int = 10
    clock_samples: int = 2_000
    write_tags: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def period_fs(self) -> int:
        return self.source.period_fs

    def validate(self) -> None:
        if self.n_slots < 1:
            raise ConfigError("n_slots must be >= 1")
        if self.chunk_slots < 1:
            raise ConfigError("chunk_slots must be >= 1")
        periods = {
            self.source.period_fs,
            self.channel_1.period_fs,
            self.channel_2.period_fs,
            self.tx_clock.period_fs,
            self.node_1.period_fs,
            self.node_2.period_fs,
        }
        if len(periods) != 1:
            raise ConfigError(f"inconsistent clock periods {sorted(periods)}")
        if self.bin_fs <= 0 or self.window_fs <= 0 or self.n_peaks < 1 or self.clock_samples < 2:
            raise ConfigError("analysis settings must be positive")

    def seed(self, name: str) -> int:
        return derive_seed(self.master_seed, name)

    def arms(self):
        return ((1, self.channel_1, self.detector_1, self.node_1), (2, self.channel_2, self.detector_2, self.node_2))

    def effective_channel(self, ch: ChannelConfig) -> ChannelConfig:
        # no clock light without sync: no Raman
        return ch if self.sync.enabled else replace(ch, raman_rate_per_slot=0.0)


def testbed_config(
    sync_enabled: bool = True,
    pair_prob: float = 0.01,
    raman_rate_per_slot: float = 0.0,
    n_slots: int = 200_000_000,
    master_seed: int = 1,
) -> ExperimentConfig:
    """Hardware values of the three-node testbed with uncalibrated rates.

    Detector efficiency is split off the end-to-end losses so each arm's
    total transmission is 24 dB and 26 dB.
    """
    det = DetectorConfig(efficiency=TESTBED_DET_EFFICIENCY, jitter_fwhm_fs=50_000, dead_time_fs=50_000_000,
                         dark_rate_hz=TESTBED_DARK_HZ, tdc_bin_fs=1_000, tdc_jitter_fwhm_fs=7_000)
    fiber_db = [loss + 10.0 * math.log10(TESTBED_DET_EFFICIENCY) for loss in TESTBED_LOSS_DB]
    ch1 = ChannelConfig(loss_db=fiber_db[0], raman_rate_per_slot=raman_rate_per_slot)
    ch2 = ChannelConfig(loss_db=fiber_db[1], raman_rate_per_slot=raman_rate_per_slot)
    sigma_rec = 20_000.0  # 20 ps per node -> 1.41 ps residual, 2 ps between nodes
    sync = SyncConfig(rec_jitter_fwhm_fs=sigma_rec * 2.0 * math.sqrt(2.0 * math.log(2.0)), loop_gain=0.01,
                      averaging_edges=1, enabled=sync_enabled)
    return ExperimentConfig(
        source=SourceConfig(pair_prob_per_pulse=pair_prob),
        channel_1=ch1,
        channel_2=ch2,
        detector_1=det,
        detector_2=det,
        sync=sync,
        tx_clock=OscillatorConfig(edge_jitter_fwhm_fs=1_000.0),
        n_slots=n_slots,
        master_seed=master_seed,
    )


# --- closed-form prediction --------------------------------------------------


@dataclass(frozen=True)
class OracleTerms:
    mu: float
    eta1: float
    eta2: float
    noise_1: float
    noise_2: float
    window_capture_fraction: float
    accidental_capture_fraction: float
    signal_noise_fraction: tuple
    noise_noise_fraction: float
    second_factorial_moment: float

    def car(self) -> float:
        return analytic_car_oracle(
            self.mu, self.eta1, self.eta2, self.noise_1, self.noise_2, self.window_capture_fraction,
            accidental_capture_fraction=self.accidental_capture_fraction,
            signal_noise_fraction=self.signal_noise_fraction,
            noise_noise_fraction=self.noise_noise_fraction,
            second_factorial_moment=self.second_factorial_moment,
        )


def _clock_variance(cfg: ExperimentConfig, node: OscillatorConfig) -> float:
    if not cfg.sync.enabled:
        return node.edge_sigma_fs**2
    clock = NodeClock(cfg.sync, node, tx=cfg.tx_clock)
    return clock.residual_sigma() ** 2 + node.edge_sigma_fs**2


def oracle_terms(cfg: ExperimentConfig) -> OracleTerms:
    """Per-slot rates and window fractions of ``cfg`` for the CAR model.

    Dead time is ignored. Raman photons are uniform over the clock pulse
    gate of their slot, dark counts uniform in time.
    """
    period = cfg.period_fs
    w = cfg.window_fs
    mu = cfg.source.mean_pairs
    parts = []
    for _, ch, det, node in cfg.arms():
        ch = cfg.effective_channel(ch)
        raman = ch.raman_rate_per_slot * det.efficiency
        dark = det.dark_rate_hz * period / FS_PER_S
        parts.append((ch.transmission * det.efficiency, raman, dark, ch.raman_gate_fs, det.timing_variance_fs2,
                      _clock_variance(cfg, node)))
    (eta1, r1, d1, g1, v1, c1), (eta2, r2, d2, g2, v2, c2) = parts
    sigma_true = math.sqrt(v1 + v2 + c1 + c2)
    sigma_acc = math.sqrt(2.0 * cfg.source.emission_sigma_fs**2 + v1 + v2 + c1 + c2)
    n1, n2 = r1 + d1, r2 + d2

    def sn_fraction(raman, dark, gate):
        n = raman + dark
        if n == 0:
            return 1.0
        return (raman * min(w / gate, 1.0) + dark * w / period) / n

    if n1 * n2 > 0:
        nn = (r1 * r2 * box_window_fraction(w, g1, g2, period) + (r1 * d2 + d1 * r2 + d1 * d2) * w / period) / (n1 * n2)
    else:
        nn = 1.0
    return OracleTerms(
        mu=mu,
        eta1=eta1,
        eta2=eta2,
        noise_1=n1,
        noise_2=n2,
        window_capture_fraction=gaussian_window_fraction(w, sigma_true),
        accidental_capture_fraction=gaussian_window_fraction(w, sigma_acc),
        signal_noise_fraction=(sn_fraction(r1, d1, g1), sn_fraction(r2, d2, g2)),
        noise_noise_fraction=nn,
        second_factorial_moment=cfg.source.second_factorial_moment,
    )


def predict_car(cfg: ExperimentConfig) -> float:
    return oracle_terms(cfg).car()


def _with_pair_prob(cfg: ExperimentConfig, p: float) -> ExperimentConfig:
    return replace(cfg, source=replace(cfg.source, pair_prob_per_pulse=p))


def _with_raman(cfg: ExperimentConfig, rate: float) -> ExperimentConfig:
    return replace(
        cfg,
        channel_1=replace(cfg.channel_1, raman_rate_per_slot=rate),
        channel_2=replace(cfg.channel_2, raman_rate_per_slot=rate),
    )


def calibrate_pair_prob(cfg: ExperimentConfig, target_car: float) -> float:
    """Pair probability giving ``target_car`` on the multi-pair-limited
    branch (above the CAR maximum, where CAR falls as the pump rises)."""
    f = lambda p: predict_car(_with_pair_prob(cfg, p))
    lo, hi = 1e-6, 0.5
    res = optimize.minimize_scalar(lambda lp: -f(math.exp(lp)), bounds=(math.log(lo), math.log(hi)), method="bounded")
    p_peak = math.exp(res.x)
    if f(p_peak) < target_car:
        raise ConfigError(f"CAR {target_car} unreachable: maximum is {f(p_peak):.4g}")
    if f(hi) > target_car:
        raise ConfigError(f"CAR {target_car} needs pair probability above {hi}")
    return bisect_decreasing(f, target_car, p_peak, hi)


def calibrate_raman(cfg: ExperimentConfig, target_car: float) -> float:
    """Raman photons per slot (same on both fibers) giving ``target_car``
    with sync enabled."""
    cfg = replace(cfg, sync=replace(cfg.sync, enabled=True))
    f = lambda r: predict_car(_with_raman(cfg, r))
    if f(0.0) < target_car:
        raise ConfigError(f"CAR without Raman is {f(0.0):.4g}, already below {target_car}")
    hi = 1e-9
    while f(hi) > target_car:
        hi *= 2.0
        if hi > 1e3:
            raise ConfigError("could not bracket the Raman rate")
    return bisect_decreasing(f, target_car, 0.0, hi)


def calibrated_testbed_config(sync_enabled: bool, n_slots: int = 200_000_000, master_seed: int = 1) -> ExperimentConfig:
    """Testbed config with the pair probability set for CAR 77 without
    the clock light and the Raman rate set for CAR 42 with it."""
    base = testbed_config(sync_enabled=False, n_slots=n_slots, master_seed=master_seed)
    p = calibrate_pair_prob(base, TESTBED_CAR_SYNC_OFF)
    base = _with_pair_prob(base, p)
    raman = calibrate_raman(base, TESTBED_CAR_SYNC_ON)
    cfg = _with_raman(base, raman)
    return replace(cfg, sync=replace(cfg.sync, enabled=sync_enabled))


# --- simulation --------------------------------------------------------------


class _Arm:
    """Per-arm state carried from chunk to chunk."""

    def __init__(self, cfg: ExperimentConfig, idx: int, ch: ChannelConfig, det: DetectorConfig, node: OscillatorConfig):
        self.cfg = cfg
        self.idx = idx
        self.ch = cfg.effective_channel(ch)
        self.det = det
        self.period = cfg.period_fs
        self.drift_seed = cfg.seed(f"drift_{idx}")
        self.clock = NodeClock(
            cfg.sync, node, delay_fs=ch.base_delay_fs, drift=ch.drift, drift_seed=self.drift_seed,
            tx=cfg.tx_clock, seed=cfg.seed(f"clock_{idx}"),
        )
        self.pending = np.empty(0, dtype=TAG_DTYPE)
        self.last_accepted = None
        self.n_tags = 0
        self.n_signal = 0

    def arrivals(self, chunk: int, s0: int, s1: int, emissions):
        _, s, o = propagate(emissions["slot"], emissions["offset_fs"], self.ch, [self.cfg.seed(f"channel_{self.idx}"), chunk],
                            drift_seed=self.drift_seed)
        rs, ro = sample_raman((s0, s1), self.ch, [self.cfg.seed(f"raman_{self.idx}"), chunk], drift_seed=self.drift_seed)
        kind = np.concatenate((np.full(s.size, TagKind.SIGNAL, np.uint8), np.full(rs.size, TagKind.RAMAN, np.uint8)))
        slot = np.concatenate((s, rs)).astype(np.uint64)
        off = np.concatenate((o, ro)).astype(np.int64)
        return slot, off, kind

    def step(self, chunk: int, s0: int, s1: int, emissions, final: bool) -> np.ndarray:
        slot, off, kind = self.arrivals(chunk, s0, s1, emissions)
        order = np.lexsort(floor_key(slot, off, self.period)[::-1])
        rng = np.random.default_rng([self.cfg.seed(f"detector_{self.idx}"), chunk])
        analog = detect_analog(slot[order], off[order], self.det, (s0, s1), rng, kind=kind[order],
                               period_fs=self.period, check_sorted=False)
        merged = sort_tags(np.concatenate((self.pending, analog)), self.period)
        if final:
            ready, self.pending = merged, merged[:0]
        else:
            # later chunks only add tags at or after slot s1 - 1
            fs, _ = floor_key(merged["slot"], merged["offset_fs"], self.period)
            n_ready = int(np.searchsorted(fs, s1 - 1, side="left"))
            ready, self.pending = merged[:n_ready], merged[n_ready:]
        keep = dead_time_filter(ready["slot"], ready["offset_fs"], self.det.dead_time_fs, self.period, self.last_accepted)
        ready = ready[keep]
        if ready.size:
            self.last_accepted = (int(ready["slot"][-1]), int(ready["offset_fs"][-1]))
        edge, _ = floor_key(ready["slot"], ready["offset_fs"], self.period)
        phase = self.clock.phase_at(edge)
        tags = tdc_record(ready, self.det, rng, period_fs=self.period, phase_fs=phase)
        tags["node_id"] = self.idx
        tags["channel_id"] = 0
        self.n_tags += tags.size
        self.n_signal += int(np.count_nonzero(tags["kind"] == TagKind.SIGNAL))
        return tags


@dataclass
class RunResult:
    report: CarReport
    histogram: Histogram
    clock_offset: ClockPhaseSeries
    singles: tuple
    duration_s: float
    predicted_car: float
    artifacts: dict = field(default_factory=dict)
    wall_time_s: float = 0.0

    @property
    def loss_db(self) -> tuple:
        """Heralded loss of each arm from coincidence and singles rates."""
        true_c = max(self.report.c_counts - self.report.a_mean_counts, 0.0)
        out = []
        for herald in (self.singles[1], self.singles[0]):
            try:
                out.append(loss_estimate(true_c / self.duration_s, herald / self.duration_s))
            except ValueError:
                out.append(float("nan"))
        return tuple(out)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _json_default(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    raise TypeError(type(v).__name__)


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    """Simulate ``cfg.n_slots`` clock slots and analyse the Rx1/Rx2 tags.

    With ``write`` the tag files, histogram, CAR report, clock offset
    series and a manifest with their SHA-256 digests go to the output
    directory (``$PICOSYNC_OUTPUT_DIR`` wins over ``cfg.output_dir``).
    """
    cfg.validate()
    t_wall = time.perf_counter()
    period = cfg.period_fs
    arms = [_Arm(cfg, idx, ch, det, node) for idx, ch, det, node in cfg.arms()]
    half_range = int((cfg.n_peaks + 1) * period)
    hist = StreamingHistogram(cfg.bin_fs, half_range, period)
    # tags move back by up to the clock phase (fiber delay) after the TDC
    phase_margin = max(a.ch.base_delay_fs for a in arms) + 10 * period if cfg.sync.enabled else 10 * period

    out_dir = resolve_output_dir(cfg)
    writers = []
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        if cfg.write_tags:
            writers = [TagWriter(out_dir / f"rx{a.idx}.qtag", period) for a in arms]

    src_seed = cfg.seed("source")
    n_chunks = -(-cfg.n_slots // cfg.chunk_slots)
    try:
        for c in range(n_chunks):
            s0 = c * cfg.chunk_slots
            s1 = min(cfg.n_slots, s0 + cfg.chunk_slots)
            emissions = sample_emissions(s1 - s0, cfg.source, [src_seed, c], start_slot=s0)
            final = c == n_chunks - 1
            out = [a.step(c, s0, s1, emissions, final) for a in arms]
            for w, tags in zip(writers, out):
                w.write(tags)
            wm = None if final else (s1 - 1) * period - phase_margin
            hist.feed(out[0], out[1], watermark=wm)
    finally:
        for w in writers:
            w.close()
    h = hist.finalize()
    report = car_from_histogram(h, cfg.window_fs, period, cfg.n_peaks)

    duration_s = cfg.n_slots * period / FS_PER_S
    samples_every = max(1, cfg.n_slots // cfg.clock_samples)
    series = []
    for a, (idx, ch, _, node) in zip(arms, cfg.arms()):
        probe = NodeClock(cfg.sync, node, delay_fs=ch.base_delay_fs, drift=ch.drift, drift_seed=a.drift_seed,
                          tx=cfg.tx_clock, seed=cfg.seed(f"clock_series_{idx}"))
        series.append(simulate_clock_phase(probe, duration_s, samples_every))
    offset = rx_offset_series(series[0], series[1])

    result = RunResult(
        report=report,
        histogram=h,
        clock_offset=offset,
        singles=tuple(a.n_tags for a in arms),
        duration_s=duration_s,
        predicted_car=predict_car(cfg),
    )
    result.wall_time_s = time.perf_counter() - t_wall
    if write:
        _write_artifacts(cfg, result, out_dir, [w.path for w in writers])
    return result


def report_dict(cfg: ExperimentConfig, result: RunResult) -> dict:
    d = result.report.to_dict()
    d.update(
        predicted_car=result.predicted_car,
        singles_rx1=result.singles[0],
        singles_rx2=result.singles[1],
        duration_s=result.duration_s,
        loss_db_rx1=result.loss_db[0],
        loss_db_rx2=result.loss_db[1],
        sync_enabled=cfg.sync.enabled,
        config=flatten(cfg),
    )
    for k, v in list(d.items()):
        if isinstance(v, float) and math.isnan(v):
            d[k] = None
    return d


def _write_artifacts(cfg: ExperimentConfig, result: RunResult, out_dir: Path, tag_paths) -> None:
    paths = {f"tags_rx{i + 1}": p for i, p in enumerate(tag_paths)}
    paths["histogram"] = out_dir / "histogram.csv"
    result.histogram.to_csv(paths["histogram"])
    paths["car_report"] = out_dir / "car_report.json"
    with open(paths["car_report"], "w") as fh:
        json.dump(report_dict(cfg, result), fh, indent=2, sort_keys=True, default=_json_default)
    paths["clock_offset"] = out_dir / "clock_offset.csv"
    result.clock_offset.to_csv(paths["clock_offset"])
    manifest = {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": flatten(cfg),
        "files": {k: {"path": Path(p).name, "sha256": _sha256(Path(p))} for k, p in paths.items()},
        "wall_time_s": result.wall_time_s,
    }
    man_path = out_dir / "manifest.json"
    with open(man_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
    result.artifacts = {k: Path(p) for k, p in paths.items()}
    result.artifacts["manifest"] = man_path


def verify_manifest(run_dir) -> dict:
    """Recompute the digests listed in a run's manifest.

    Returns ``{name: ok}``; a missing file counts as a mismatch.
    """
    run_dir = Path(run_dir)
    with open(run_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    out = {}
    for name, entry in manifest["files"].items():
        p = run_dir / entry["path"]
        out[name] = p.exists() and _sha256(p) == entry["sha256"]
    return out
