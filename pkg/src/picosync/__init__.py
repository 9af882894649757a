"""Event-level simulator and analysis tools for a clock-synchronised
photon-pair distribution network."""

__version__ = "0.1.0"

from .analysis import (  # noqa: E402
    CarReport,
    Histogram,
    analytic_car_oracle,
    car_from_histogram,
    coincidence_histogram,
    fidelity_visibility,
    jitter_stats,
    loss_estimate,
)
from .channel import ChannelConfig, DriftKind, DriftModel  # noqa: E402
from .detector import TAG_DTYPE, DetectorConfig, TimeTag  # noqa: E402
from .engine import ExperimentConfig, run_experiment  # noqa: E402
from .source import ConfigError, MultiPairModel, SourceConfig  # noqa: E402
from .sync import ClockPhaseSeries, OscillatorConfig, SyncConfig  # noqa: E402
from .timebase import Timestamp  # noqa: E402
