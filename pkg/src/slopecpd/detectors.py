"""Stopping rules for slope changes in a sensor array.

Every detector works on standardized residuals and keeps a :class:`WindowState`,
so candidate change-points are restricted to ``t - w <= k <= t - 1``.  The
statistic at time ``t`` is the maximum over retained ``k`` of a per-candidate
profile:

* mixture GLR: ``sum_n g(U_{n,k,t})`` with ``g(x) = log(1 - p0 + p0 exp(x^2/2))``
* mixture CUSUM: ``sum_n log(1 - p0 + p0 exp(l_n(k, t, delta_n)))`` for nominal slopes
* adaptive mixture: the GLR profile with per-sensor weights ``rho_n`` from a Beta
  posterior on the affected fraction
* mean-shift mixture: the GLR profile with the flat statistic ``tau^-1/2 sum z``
* multi-chart CUSUM: no mixing, alarm when any single sensor's slope CUSUM
  reaches its own threshold.

Module-level ``step_*`` functions are the functional core; the classes bundle a
config, a window and (optionally) a :class:`SensorModel` for raw readings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .local_stats import WindowState, mixture_log, soft_threshold_g
from .model import ObservationFrame, SensorModel, standardize

__all__ = [
    "AdaptiveParams",
    "DetectorConfig",
    "DetectorStatus",
    "DetectionResult",
    "AdaptiveState",
    "glr_profile",
    "cusum_profile",
    "meanshift_profile",
    "adaptive_profile",
    "cusum_matrix",
    "step_mixture_glr",
    "step_mixture_cusum",
    "step_adaptive",
    "step_multichart_cusum",
    "step_meanshift_mixture",
    "estimate_changepoint",
    "MixtureGLR",
    "MixtureCUSUM",
    "AdaptiveMixture",
    "MeanShiftMixture",
    "MultiChartCUSUM",
    "make_detector",
    "DETECTOR_KINDS",
]


@dataclass(frozen=True)
class AdaptiveParams:
    """Beta(alpha, beta) prior on the affected fraction and the indicator cutoff ``a``."""

    alpha: float = 1.0
    beta: float = 1.0
    a: float = 2.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta prior parameters must be positive")
        if not np.isfinite(self.a):
            raise ValueError("indicator cutoff must be finite")


@dataclass(frozen=True)
class DetectorConfig:
    """Threshold ``b``, assumed affected fraction ``p0`` and window ``w``.

    ``nominal_rates`` are the mixture-CUSUM slopes in standardized units
    (``delta_n / sigma_n`` per step); ``adaptive`` switches on the Beta-posterior
    weights.
    """

    b: float
    p0: float = 0.3
    w: int = 200
    nominal_rates: np.ndarray | None = field(default=None, repr=False)
    adaptive: AdaptiveParams | None = None

    def __post_init__(self):
        if not (0.0 < self.p0 <= 1.0):
            raise ValueError(f"p0 must lie in (0, 1], got {self.p0}")
        if not np.isfinite(self.b):
            raise ValueError("threshold must be finite")
        if int(self.w) != self.w or self.w < 1:
            raise ValueError(f"window must be a positive integer, got {self.w}")
        object.__setattr__(self, "w", int(self.w))
        if self.nominal_rates is not None:
            rates = np.atleast_1d(np.asarray(self.nominal_rates, dtype=float))
            if not np.all(np.isfinite(rates)):
                raise ValueError("nominal rates must be finite")
            rates.setflags(write=False)
            object.__setattr__(self, "nominal_rates", rates)


@dataclass(frozen=True)
class DetectorStatus:
    t: int
    statistic: float
    alarmed: bool


@dataclass(frozen=True)
class DetectionResult:
    """Alarm time, the maximizing candidate ``k_hat`` and the slope estimates there."""

    stop_time: int
    k_hat: int
    c_hat: np.ndarray
    per_sensor_u: np.ndarray
    statistic: float

    def to_record(self) -> dict:
        return {
            "stop_time": int(self.stop_time),
            "k_hat": int(self.k_hat),
            "statistic": float(self.statistic),
            "c_hat": [float(c) for c in self.c_hat],
        }


@dataclass
class AdaptiveState:
    """Current indicators ``s_n`` and posterior-mean weights ``rho_n``."""

    s: np.ndarray
    rho: np.ndarray

    @classmethod
    def initial(cls, n_sensors: int, params: AdaptiveParams) -> "AdaptiveState":
        s = np.zeros(n_sensors, dtype=np.int8)
        return cls(s, posterior_mean(s, params))


def posterior_mean(s, params: AdaptiveParams) -> np.ndarray:
    """``(s + alpha) / (alpha + beta + 1)`` for a single Bernoulli indicator ``s``."""
    return (np.asarray(s, dtype=float) + params.alpha) / (params.alpha + params.beta + 1.0)


def _status(t: int, stat: float, b: float) -> DetectorStatus:
    stat = float(stat)
    return DetectorStatus(t, stat, stat >= b)


def _rates(config: DetectorConfig, n_sensors: int) -> np.ndarray:
    if config.nominal_rates is None:
        raise ValueError("mixture CUSUM needs nominal_rates")
    return np.broadcast_to(config.nominal_rates, (n_sensors,))


# -- per-candidate profiles -------------------------------------------------

def glr_profile(config: DetectorConfig, state: WindowState) -> np.ndarray:
    """``sum_n g(U_{n,k,t})`` for every retained candidate ``k``."""
    return soft_threshold_g(state.u_matrix(), config.p0).sum(axis=1)


def meanshift_profile(config: DetectorConfig, state: WindowState) -> np.ndarray:
    return soft_threshold_g(state.u_meanshift_matrix(), config.p0).sum(axis=1)


def cusum_matrix(rates, state: WindowState) -> np.ndarray:
    """Per-sensor slope log-likelihood ``l_n(k, t, delta_n)``, shape ``(m, N)``.

    In standardized units ``l = delta * W - delta**2 * A_tau / 2``.
    """
    rates = np.broadcast_to(np.asarray(rates, dtype=float), (state.n_sensors,))
    a = state.a_table[state.taus()][:, None]
    return rates * state.weighted_sums() - 0.5 * rates * rates * a


def cusum_profile(config: DetectorConfig, state: WindowState) -> np.ndarray:
    ell = cusum_matrix(_rates(config, state.n_sensors), state)
    return mixture_log(ell, config.p0).sum(axis=1)


def adaptive_profile(state: WindowState, rho) -> np.ndarray:
    u = state.u_matrix()
    return mixture_log(0.5 * u * u, np.asarray(rho, dtype=float)[None, :]).sum(axis=1)


# -- functional steps -------------------------------------------------------

def step_mixture_glr(config: DetectorConfig, state: WindowState, z) -> DetectorStatus:
    """Advance ``state`` with residuals ``z`` and evaluate the mixture GLR statistic."""
    state.advance(z)
    return _status(state.t, glr_profile(config, state).max(), config.b)


def step_mixture_cusum(config: DetectorConfig, state: WindowState, z) -> DetectorStatus:
    rates = _rates(config, state.n_sensors)
    state.advance(z)
    ell = cusum_matrix(rates, state)
    return _status(state.t, mixture_log(ell, config.p0).sum(axis=1).max(), config.b)


def step_adaptive(config: DetectorConfig, state: WindowState, adaptive: AdaptiveState, z) -> DetectorStatus:
    """Adaptive mixture step; refreshes ``adaptive.s`` and ``adaptive.rho`` in place."""
    params = config.adaptive or AdaptiveParams()
    state.advance(z)
    u = state.u_matrix()
    adaptive.s = (u.max(axis=0) > params.a).astype(np.int8)
    adaptive.rho = posterior_mean(adaptive.s, params)
    stat = mixture_log(0.5 * u * u, adaptive.rho[None, :]).sum(axis=1).max()
    return _status(state.t, stat, config.b)


def step_meanshift_mixture(config: DetectorConfig, state: WindowState, z) -> DetectorStatus:
    if not state.track_sums:
        raise ValueError("mean-shift mixture needs a WindowState with track_sums=True")
    state.advance(z)
    return _status(state.t, meanshift_profile(config, state).max(), config.b)


def step_multichart_cusum(thresholds, nominal_rates, state: WindowState, z) -> DetectorStatus:
    """One step of the per-sensor slope CUSUM bank.

    The reported statistic is the largest per-sensor CUSUM when the thresholds
    are all equal, otherwise the largest excess ``stat_n - h_n`` (alarm at 0).
    """
    h = np.broadcast_to(np.asarray(thresholds, dtype=float), (state.n_sensors,))
    state.advance(z)
    per_sensor = cusum_matrix(nominal_rates, state).max(axis=0)
    alarmed = bool(np.any(per_sensor >= h))
    if np.all(h == h[0]):
        return DetectorStatus(state.t, float(per_sensor.max()), alarmed)
    return DetectorStatus(state.t, float((per_sensor - h).max()), alarmed)


def estimate_changepoint(config: DetectorConfig, state: WindowState, model: SensorModel | None = None,
                         profile: np.ndarray | None = None) -> DetectionResult:
    """Maximizing candidate of the mixture profile at an alarm (earliest ``k`` on ties).

    ``profile`` defaults to the mixture GLR profile of ``state``; slopes are in
    signal units when ``model`` is given.
    """
    if state.t == 0:
        raise RuntimeError("no observations yet")
    if profile is None:
        profile = glr_profile(config, state)
    stat = float(profile.max())
    if stat < config.b:
        raise RuntimeError(f"detector has not alarmed at t={state.t} (statistic {stat:.4g} < b={config.b:.4g})")
    return _result_at(state, int(state.candidates()[int(np.argmax(profile))]), stat, model)


def _result_at(state: WindowState, k_hat: int, stat: float, model: SensorModel | None) -> DetectionResult:
    return DetectionResult(
        stop_time=state.t,
        k_hat=k_hat,
        c_hat=state.slope_mle(k_hat, model),
        per_sensor_u=state.u_stat(k_hat),
        statistic=stat,
    )


# -- stateful detectors -----------------------------------------------------

class _Detector:
    kind = ""
    _track_sums = False

    def __init__(self, config: DetectorConfig, n_sensors: int | None = None, model: SensorModel | None = None):
        if n_sensors is None:
            if model is None:
                raise ValueError("give n_sensors or a SensorModel")
            n_sensors = model.n_sensors
        if model is not None and model.n_sensors != n_sensors:
            raise ValueError("model and n_sensors disagree")
        self.config = config
        self.model = model
        self.state = WindowState(n_sensors, config.w, track_sums=self._track_sums)
        self.status: DetectorStatus | None = None

    @property
    def n_sensors(self) -> int:
        return self.state.n_sensors

    def _step(self, z) -> DetectorStatus:
        raise NotImplementedError

    def profile(self) -> np.ndarray:
        raise NotImplementedError

    def update(self, z) -> DetectorStatus:
        """Consume one vector of standardized residuals."""
        z = np.array(z, dtype=float)
        self.status = self._step(z)
        return self.status

    def observe(self, frame) -> DetectorStatus:
        """Consume raw readings (a frame or a vector) using the sensor model."""
        if self.model is None:
            raise ValueError("observe() needs a SensorModel; use update() for residuals")
        if isinstance(frame, ObservationFrame) and frame.t != self.state.t + 1:
            raise ValueError(f"expected frame t={self.state.t + 1}, got {frame.t}")
        return self.update(standardize(frame, self.model))

    def changepoint(self) -> DetectionResult:
        if self.status is None or not self.status.alarmed:
            raise RuntimeError("changepoint() is only defined once the detector has alarmed")
        return estimate_changepoint(self.config, self.state, self.model, profile=self.profile())

    def run(self, rows, raw: bool | None = None, trace: list | None = None) -> DetectionResult | None:
        """Feed rows until the first alarm.

        Rows are raw readings when the detector has a model (override with ``raw``),
        standardized residuals otherwise.  Per-step statuses are appended to ``trace``.
        """
        raw = self.model is not None if raw is None else raw
        for row in rows:
            status = self.observe(row) if raw else self.update(row)
            if trace is not None:
                trace.append(status)
            if status.alarmed:
                return self.changepoint()
        return None


class MixtureGLR(_Detector):
    kind = "glr"

    def _step(self, z):
        return step_mixture_glr(self.config, self.state, z)

    def profile(self):
        return glr_profile(self.config, self.state)


class MixtureCUSUM(_Detector):
    kind = "cusum"

    def __init__(self, config, n_sensors=None, model=None):
        super().__init__(config, n_sensors, model)
        _rates(config, self.n_sensors)

    def _step(self, z):
        return step_mixture_cusum(self.config, self.state, z)

    def profile(self):
        return cusum_profile(self.config, self.state)


class AdaptiveMixture(_Detector):
    kind = "adaptive"

    def __init__(self, config, n_sensors=None, model=None):
        super().__init__(config, n_sensors, model)
        self.params = config.adaptive or AdaptiveParams()
        self.adaptive = AdaptiveState.initial(self.n_sensors, self.params)

    def _step(self, z):
        return step_adaptive(self.config, self.state, self.adaptive, z)

    def profile(self):
        return adaptive_profile(self.state, self.adaptive.rho)


class MeanShiftMixture(_Detector):
    kind = "meanshift"
    _track_sums = True

    def _step(self, z):
        return step_meanshift_mixture(self.config, self.state, z)

    def profile(self):
        return meanshift_profile(self.config, self.state)


class MultiChartCUSUM(_Detector):
    """Bank of single-sensor slope CUSUMs; ``config.b`` is the common threshold
    unless per-sensor ``thresholds`` are given."""

    kind = "multichart"

    def __init__(self, config, n_sensors=None, model=None, thresholds=None):
        super().__init__(config, n_sensors, model)
        self.rates = _rates(config, self.n_sensors)
        h = config.b if thresholds is None else thresholds
        self.thresholds = np.broadcast_to(np.asarray(h, dtype=float), (self.n_sensors,)).copy()

    def _step(self, z):
        return step_multichart_cusum(self.thresholds, self.rates, self.state, z)

    def profile(self):
        # candidate profile of the sensor with the largest excess over its threshold
        ell = cusum_matrix(self.rates, self.state)
        n_star = int(np.argmax(ell.max(axis=0) - self.thresholds))
        return ell[:, n_star]

    def changepoint(self):
        if self.status is None or not self.status.alarmed:
            raise RuntimeError("changepoint() is only defined once the detector has alarmed")
        prof = self.profile()
        k_hat = int(self.state.candidates()[int(np.argmax(prof))])
        return _result_at(self.state, k_hat, self.status.statistic, self.model)


DETECTOR_KINDS = {
    cls.kind: cls for cls in (MixtureGLR, MixtureCUSUM, AdaptiveMixture, MeanShiftMixture, MultiChartCUSUM)
}


def make_detector(kind: str, config: DetectorConfig, n_sensors: int | None = None,
                  model: SensorModel | None = None) -> _Detector:
    try:
        cls = DETECTOR_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown detector kind {kind!r}; choose from {sorted(DETECTOR_KINDS)}") from None
    return cls(config, n_sensors, model)
