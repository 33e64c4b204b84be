"""Detection of sparse linear-trend changes in multi-sensor data streams."""

__version__ = "0.1.0"

from .calibration import arl_approx, calibrate, conservative_threshold, edd_bound, solve_threshold
from .detectors import (AdaptiveParams, DetectionResult, DetectorConfig, MeanShiftMixture, MixtureCUSUM,
                        MixtureGLR, AdaptiveMixture, MultiChartCUSUM, make_detector)
from .model import ObservationFrame, ScenarioSpec, SensorModel

__all__ = [
    "AdaptiveMixture",
    "AdaptiveParams",
    "DetectionResult",
    "DetectorConfig",
    "MeanShiftMixture",
    "MixtureCUSUM",
    "MixtureGLR",
    "MultiChartCUSUM",
    "ObservationFrame",
    "ScenarioSpec",
    "SensorModel",
    "arl_approx",
    "calibrate",
    "conservative_threshold",
    "edd_bound",
    "make_detector",
    "solve_threshold",
]
