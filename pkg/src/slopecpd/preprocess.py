"""Whitening, linear detrending and differencing of sensor streams."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import ObservationFrame, SensorModel

__all__ = [
    "WhitenTransform",
    "build_whitener",
    "whiten",
    "unwhiten",
    "whitened_p0",
    "LinearTrend",
    "detrend_linear",
    "difference",
]

# smallest eigenvalue, relative to the largest, accepted as positive definite
PD_RTOL = 1e-10


@dataclass(frozen=True)
class WhitenTransform:
    """``root_inverse`` is the symmetric ``cov^(-1/2)``; ``root`` its inverse ``cov^(1/2)``."""

    root_inverse: np.ndarray
    mu: np.ndarray
    root: np.ndarray

    @property
    def n_sensors(self) -> int:
        return self.mu.size


def build_whitener(cov, mu=None) -> WhitenTransform:
    """Symmetric inverse square root of ``cov`` through its eigendecomposition."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(np.abs(cov).max(), 1e-300)):
        raise ValueError("covariance must be symmetric")
    n = cov.shape[0]
    mu = np.zeros(n) if mu is None else np.asarray(mu, dtype=float)
    if mu.shape != (n,):
        raise ValueError(f"mu must have length {n}")
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if evals.min() <= PD_RTOL * max(evals.max(), 0.0):
        raise ValueError(f"covariance is not positive definite (min eigenvalue {evals.min():.3g})")
    root_inv = (evecs / np.sqrt(evals)) @ evecs.T
    root = (evecs * np.sqrt(evals)) @ evecs.T
    # exact symmetry
    root_inv = 0.5 * (root_inv + root_inv.T)
    root = 0.5 * (root + root.T)
    for arr in (root_inv, root, mu):
        arr.setflags(write=False)
    return WhitenTransform(root_inv, mu, root)


def whiten(transform: WhitenTransform, frame):
    """``cov^(-1/2) (y - mu)`` for a frame, a vector or a ``(T, N)`` array.

    Frames come back as frames with the same time index.
    """
    if isinstance(frame, ObservationFrame):
        return ObservationFrame(frame.t, whiten(transform, frame.values))
    y = np.asarray(frame, dtype=float)
    if y.shape[-1] != transform.n_sensors:
        raise ValueError(f"expected {transform.n_sensors} sensors, got {y.shape[-1]}")
    return (y - transform.mu) @ transform.root_inverse.T


def unwhiten(transform: WhitenTransform, z):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != transform.n_sensors:
        raise ValueError(f"expected {transform.n_sensors} sensors, got {z.shape[-1]}")
    return z @ transform.root.T + transform.mu


def whitened_p0(p0: float | None = None) -> float:
    """Mixing probability for whitened streams.

    A sparse slope change is spread over every coordinate by the transform, so
    the default is 1.  Other values are allowed but warned about.
    """
    if p0 is None or p0 == 1.0:
        return 1.0
    if not (0.0 < p0 <= 1.0):
        raise ValueError(f"p0 must lie in (0, 1], got {p0}")
    warnings.warn("p0 < 1 on whitened data: the change is generally no longer sparse after whitening",
                  stacklevel=2)
    return float(p0)


@dataclass(frozen=True)
class LinearTrend:
    """Per-sensor least-squares line ``intercept + slope * t`` fitted on ``t = 1..fit_horizon``.

    ``sigma`` is the residual standard deviation of the fit (``n - 2`` degrees of
    freedom); it is an estimate, not a known quantity.
    """

    intercept: np.ndarray
    slope: np.ndarray
    sigma: np.ndarray
    fit_horizon: int
    slope_se: np.ndarray

    def residuals(self, y, start: int = 1) -> np.ndarray:
        """Detrended readings for rows of ``y`` at times ``start, start+1, ...``."""
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        t = np.arange(start, start + y.shape[0], dtype=float)[:, None]
        return y - (self.intercept + self.slope * t)

    def model(self) -> SensorModel:
        """Zero-mean model for the residual stream with the fitted noise level."""
        return SensorModel(np.zeros_like(self.sigma), self.sigma)


def detrend_linear(history, fit_horizon: int) -> LinearTrend:
    """Fit a line per sensor on the first ``fit_horizon`` rows of ``history``."""
    y = np.asarray(history, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if fit_horizon < 2:
        raise ValueError("fit_horizon must be >= 2")
    if y.shape[0] < fit_horizon:
        raise ValueError(f"history has {y.shape[0]} rows, fit_horizon is {fit_horizon}")
    seg = y[:fit_horizon]
    t = np.arange(1, fit_horizon + 1, dtype=float)
    design = np.column_stack([np.ones(fit_horizon), t])
    coef, _, rank, _ = np.linalg.lstsq(design, seg, rcond=None)
    if rank < 2:
        raise ValueError("time column is constant; cannot fit a slope")
    resid = seg - design @ coef
    dof = fit_horizon - 2
    if dof > 0:
        sigma = np.sqrt((resid**2).sum(axis=0) / dof)
    else:
        sigma = np.zeros(seg.shape[1])
    sxx = ((t - t.mean()) ** 2).sum()
    return LinearTrend(coef[0], coef[1], sigma, fit_horizon, sigma / np.sqrt(sxx))


def difference(series) -> np.ndarray:
    """First differences along time (axis 0)."""
    x = np.asarray(series, dtype=float)
    if x.shape[0] < 2:
        raise ValueError("need at least two observations to difference")
    return np.diff(x, axis=0)
