"""Observation model and synthetic scenario generation.

Sensors are Gaussian with known pre-change mean and standard deviation.  At the
change-point ``kappa`` the means of an affected subset start drifting linearly,
``mu_n + c_n * (t - kappa)`` for ``t > kappa``.  ``kappa = None`` encodes a stream
that never changes.

Random numbers come from one PCG64 stream per ``(trial, sensor)`` pair, addressed
through ``SeedSequence(master_seed, spawn_key=(trial, sensor))``.  Any consumer that
knows the master seed and the trial index can rebuild the exact same noise,
independently of how trials are scheduled.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

__all__ = [
    "SensorModel",
    "ObservationFrame",
    "ScenarioSpec",
    "standardize",
    "sensor_generators",
    "NoiseSource",
    "scenario_array",
    "generate_scenario",
    "load_covariance",
    "load_scenario",
]


@dataclass(frozen=True)
class SensorModel:
    """Known pre-change mean and standard deviation of every sensor."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if mu.ndim != 1 or mu.shape != sigma.shape:
            raise ValueError(f"mu and sigma must be 1-d of equal length, got {mu.shape} and {sigma.shape}")
        if mu.size < 1:
            raise ValueError("at least one sensor is required")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma)):
            raise ValueError("mu and sigma must be finite")
        if np.any(sigma <= 0):
            raise ValueError(f"sigma must be positive, got min {sigma.min()}")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_sensors(self) -> int:
        return self.mu.size

    @classmethod
    def standard(cls, n_sensors: int) -> "SensorModel":
        """Zero-mean, unit-variance model for ``n_sensors`` sensors."""
        return cls(np.zeros(n_sensors), np.ones(n_sensors))


@dataclass(frozen=True)
class ObservationFrame:
    """Raw readings of all sensors at one (1-based) time index."""

    t: int
    values: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite reading at t={self.t}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class ScenarioSpec:
    """Ground truth for a synthetic stream.

    ``affected`` holds 0-based sensor indices and ``rates`` the slope of each affected
    sensor in signal units per step, in the same order.  ``cov`` is an optional
    pre-change covariance; when it is absent the noise is ``diag(sigma**2)``.
    """

    n_sensors: int
    kappa: int | None = None
    affected: tuple[int, ...] = ()
    rates: tuple[float, ...] = ()
    cov: np.ndarray | None = field(default=None, repr=False)
    horizon: int = 1000

    def __post_init__(self):
        if self.n_sensors < 1:
            raise ValueError("n_sensors must be >= 1")
        affected = tuple(int(a) for a in self.affected)
        rates = tuple(float(c) for c in self.rates)
        object.__setattr__(self, "affected", affected)
        object.__setattr__(self, "rates", rates)
        if len(set(affected)) != len(affected):
            raise ValueError("affected sensors must be distinct")
        if any(a < 0 or a >= self.n_sensors for a in affected):
            raise ValueError(f"affected indices must lie in [0, {self.n_sensors})")
        if len(rates) != len(affected):
            raise ValueError("one rate per affected sensor is required")
        if self.kappa is not None:
            if self.kappa < 0:
                raise ValueError("kappa must be >= 0")
            if not affected:
                raise ValueError("a change needs at least one affected sensor")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.cov is not None:
            cov = np.asarray(self.cov, dtype=float)
            if cov.shape != (self.n_sensors, self.n_sensors):
                raise ValueError(f"cov must be {self.n_sensors}x{self.n_sensors}, got {cov.shape}")
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * np.abs(cov).max()):
                raise ValueError("cov must be symmetric")
            cov = cov.copy()
            cov.setflags(write=False)
            object.__setattr__(self, "cov", cov)

    @property
    def fraction(self) -> float:
        """Fraction ``p`` of affected sensors."""
        return len(self.affected) / self.n_sensors

    def rate_vector(self) -> np.ndarray:
        """Length-N slope vector with zeros on unaffected sensors."""
        c = np.zeros(self.n_sensors)
        c[list(self.affected)] = self.rates
        return c


def standardize(values, model: SensorModel) -> np.ndarray:
    """Residuals ``(y - mu) / sigma``.  Accepts a frame, a vector or a (T, N) array."""
    if isinstance(values, ObservationFrame):
        values = values.values
    y = np.asarray(values, dtype=float)
    if y.shape[-1] != model.n_sensors:
        raise ValueError(f"expected {model.n_sensors} sensors, got {y.shape[-1]}")
    return (y - model.mu) / model.sigma


def sensor_generators(master_seed: int, n_sensors: int, trial: int = 0) -> list[np.random.Generator]:
    """Independent generators for every sensor of one trial."""
    return [
        np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(trial, n))))
        for n in range(n_sensors)
    ]


def _noise_factor(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(cov)
        raise ValueError(f"covariance is not positive definite (min eigenvalue {eig.min():.3g})") from None


class NoiseSource:
    """Block-wise pre-change noise for one trial.

    Each sensor draws from its own generator, so the values do not depend on the
    block sizes used to consume them.  With ``cov`` the independent draws are
    coloured by the Cholesky factor of the covariance; otherwise ``scale`` (the
    per-sensor standard deviation, default 1) is applied.
    """

    def __init__(self, master_seed: int, n_sensors: int, trial: int = 0, scale=None, cov=None):
        self._gens = sensor_generators(master_seed, n_sensors, trial)
        self._factor = None if cov is None else _noise_factor(np.asarray(cov, dtype=float))
        self._scale = None if scale is None else np.asarray(scale, dtype=float)

    def draw(self, m: int) -> np.ndarray:
        z = np.empty((m, len(self._gens)))
        for n, gen in enumerate(self._gens):
            z[:, n] = gen.standard_normal(m)
        if self._factor is not None:
            return z @ self._factor.T
        if self._scale is not None:
            z *= self._scale
        return z


def scenario_array(scenario: ScenarioSpec, model: SensorModel, seed: int, trial: int = 0) -> np.ndarray:
    """Raw readings of a scenario as a ``(horizon, N)`` array; row ``i`` is time ``i + 1``."""
    if model.n_sensors != scenario.n_sensors:
        raise ValueError(f"model has {model.n_sensors} sensors, scenario has {scenario.n_sensors}")
    scale = None if scenario.cov is not None else model.sigma
    y = NoiseSource(seed, scenario.n_sensors, trial, scale=scale, cov=scenario.cov).draw(scenario.horizon)
    y += model.mu
    if scenario.kappa is not None:
        t = np.arange(1, scenario.horizon + 1)
        elapsed = np.maximum(t - scenario.kappa, 0).astype(float)
        y += elapsed[:, None] * scenario.rate_vector()[None, :]
    return y


def generate_scenario(scenario: ScenarioSpec, model: SensorModel, seed: int, trial: int = 0) -> list[ObservationFrame]:
    """Frames ``t = 1 .. horizon`` drawn from the scenario."""
    y = scenario_array(scenario, model, seed, trial)
    return [ObservationFrame(i + 1, row) for i, row in enumerate(y)]


def iter_frames(y: np.ndarray, start: int = 1) -> Iterator[ObservationFrame]:
    for i, row in enumerate(np.asarray(y, dtype=float)):
        yield ObservationFrame(start + i, row)


def load_covariance(path) -> np.ndarray:
    """N x N covariance from a header-less CSV file."""
    cov = np.loadtxt(path, delimiter=",", ndmin=2)
    if cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance CSV must be square, got {cov.shape}")
    return cov


def load_scenario(path) -> tuple[ScenarioSpec, int]:
    """Read a JSON scenario file and return ``(scenario, seed)``.

    Keys: ``n_sensors``, ``kappa`` (null for no change), ``affected`` (1-based sensor
    numbers, matching the ``s1..sN`` stream columns), ``rates``, ``cov_path``
    (relative to the scenario file), ``horizon`` and ``seed``.
    """
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    unknown = set(raw) - {"n_sensors", "kappa", "affected", "rates", "cov_path", "horizon", "seed"}
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    cov = None
    if raw.get("cov_path"):
        cov_path = os.path.join(os.path.dirname(os.path.abspath(path)), raw["cov_path"])
        cov = load_covariance(cov_path)
    affected = tuple(int(a) - 1 for a in raw.get("affected", ()))
    scenario = ScenarioSpec(
        n_sensors=int(raw["n_sensors"]),
        kappa=raw.get("kappa"),
        affected=affected,
        rates=tuple(raw.get("rates", ())),
        cov=cov,
        horizon=int(raw.get("horizon", 1000)),
    )
    return scenario, int(raw.get("seed", 0))
