"""Per-sensor statistics for a slope change starting after a candidate time ``k``.

For a candidate change-point ``k`` and current time ``t`` (``tau = t - k`` post-change
samples), with standardized residuals ``z_i``:

* ``W_{n,k,t} = sum_{i=k+1}^{t} (i - k) z_{n,i}`` is the triangle-weighted sum,
* ``A_tau = 1^2 + ... + tau^2`` its variance under no change,
* ``U_{n,k,t} = W / sqrt(A_tau)`` the unit-variance matched-filter output, and
* ``U^2 / 2`` the per-sensor log generalized likelihood ratio.

``WindowState`` keeps ``W`` for the last ``w`` candidates in a ring buffer and
updates them recursively, ``W_{k,t+1} = W_{k,t} + (t + 1 - k) z_{t+1}``.
"""

from __future__ import annotations

import numpy as np

from .model import SensorModel

__all__ = [
    "OVERFLOW_GUARD",
    "a_tau",
    "soft_threshold_g",
    "mixture_log",
    "WindowState",
    "local_loglik",
]

# Beyond this value of x**2/2 the direct form of g overflows long before exp(709).
OVERFLOW_GUARD = 500.0


def a_tau(tau):
    """Sum of squares ``1 + 4 + ... + tau**2`` in closed form."""
    tau_arr = np.asarray(tau)
    if np.any(tau_arr < 1):
        raise ValueError("tau must be >= 1")
    if tau_arr.ndim == 0:
        t = int(tau_arr)
        return t * (t + 1) * (2 * t + 1) // 6
    t = tau_arr.astype(np.int64)
    return t * (t + 1) * (2 * t + 1) // 6


def _check_p0(p0):
    p = np.asarray(p0, dtype=float)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError(f"mixing probability must lie in (0, 1], got {p0}")
    return p


def mixture_log(q, p0):
    """``log(1 - p0 + p0 * exp(q))`` for any real ``q``, without overflow.

    ``p0`` may be a scalar or broadcast against ``q`` (per-sensor weights).
    """
    p = _check_p0(p0)
    q = np.asarray(q, dtype=float)
    big = q > OVERFLOW_GUARD
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        shift = p * np.expm1(np.where(big, 0.0, q))
        direct = np.log1p(shift)
        tail = q + np.log(p + (1.0 - p) * np.exp(-np.where(big, q, OVERFLOW_GUARD)))
        # very negative q with p0 near 1: log1p(-1 + tiny) loses everything
        low = np.logaddexp(np.log1p(-p), np.log(p) + q)
    out = np.where(big, tail, np.where(shift > -0.5, direct, low))
    return out[()] if out.ndim == 0 else out


def soft_threshold_g(x, p0):
    """Mixture soft-threshold ``g(x) = log(1 - p0 + p0 exp(x**2 / 2))``."""
    x = np.asarray(x, dtype=float)
    return mixture_log(0.5 * x * x, p0)


class WindowState:
    """Ring buffer of weighted sums for the last ``w`` candidate change-points.

    After ``t`` observations the retained candidates are ``k = max(0, t - w) .. t - 1``.
    With ``track_sums`` the buffer also keeps the flat sums ``sum_{i=k+1}^t z_i``
    used by the mean-shift baseline.
    """

    def __init__(self, n_sensors: int, w: int, track_sums: bool = False):
        if w < 1:
            raise ValueError("window length must be >= 1")
        if n_sensors < 1:
            raise ValueError("n_sensors must be >= 1")
        self.n_sensors = n_sensors
        self.w = w
        self.t = 0
        self.a_table = np.zeros(w + 1)
        self.a_table[1:] = a_tau(np.arange(1, w + 1))
        self._k = np.full(w, -1, dtype=np.int64)
        self._W = np.zeros((w, n_sensors))
        self._S = np.zeros((w, n_sensors)) if track_sums else None

    @property
    def track_sums(self) -> bool:
        return self._S is not None

    def copy(self) -> "WindowState":
        other = WindowState.__new__(WindowState)
        other.__dict__.update(self.__dict__)
        other._k = self._k.copy()
        other._W = self._W.copy()
        other._S = None if self._S is None else self._S.copy()
        return other

    def advance(self, z) -> "WindowState":
        """Consume the residual vector of time ``t + 1``; returns ``self``."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_sensors,):
            raise ValueError(f"expected {self.n_sensors} residuals, got shape {z.shape}")
        slot = self.t % self.w
        # candidate k = t enters with W = 0 and evicts k = t - w
        self._k[slot] = self.t
        self._W[slot] = 0.0
        if self._S is not None:
            self._S[slot] = 0.0
        self.t += 1
        live = self._k >= 0
        tau = (self.t - self._k[live]).astype(float)
        self._W[live] += tau[:, None] * z[None, :]
        if self._S is not None:
            self._S[live] += z[None, :]
        return self

    def _order(self) -> np.ndarray:
        m = min(self.t, self.w)
        first = self.t - m
        return np.arange(first, self.t) % self.w

    def candidates(self) -> np.ndarray:
        """Retained candidate change-points in increasing order."""
        m = min(self.t, self.w)
        return np.arange(self.t - m, self.t)

    def taus(self) -> np.ndarray:
        return self.t - self.candidates()

    def _slot(self, k: int) -> int:
        if not (max(0, self.t - self.w) <= k < self.t):
            raise KeyError(f"candidate k={k} is not retained at t={self.t} (w={self.w})")
        return k % self.w

    def weighted_sums(self) -> np.ndarray:
        """``W`` for every retained candidate, shape ``(m, N)`` in candidate order."""
        return self._W[self._order()]

    def flat_sums(self) -> np.ndarray:
        if self._S is None:
            raise RuntimeError("flat sums are not tracked; create the state with track_sums=True")
        return self._S[self._order()]

    def w_sum(self, k: int) -> np.ndarray:
        return self._W[self._slot(k)].copy()

    def u_stat(self, k: int) -> np.ndarray:
        """Matched-filter statistic ``U_{n,k,t}`` of every sensor."""
        slot = self._slot(k)
        return self._W[slot] / np.sqrt(self.a_table[self.t - k])

    def u_matrix(self) -> np.ndarray:
        """``U`` for every retained candidate, shape ``(m, N)``."""
        return self.weighted_sums() / np.sqrt(self.a_table[self.taus()])[:, None]

    def u_meanshift_matrix(self) -> np.ndarray:
        """Flat-window statistic ``tau**-0.5 * sum z`` for every retained candidate."""
        return self.flat_sums() / np.sqrt(self.taus().astype(float))[:, None]

    def slope_mle(self, k: int, model: SensorModel | None = None) -> np.ndarray:
        """Maximum likelihood slope after ``k``; in signal units when ``model`` is given."""
        slot = self._slot(k)
        c = self._W[slot] / self.a_table[self.t - k]
        return c if model is None else c * model.sigma


def local_loglik(y, k: int, t: int, c, model: SensorModel) -> np.ndarray:
    """Log-likelihood ratio of a slope ``c`` starting after ``k``, using ``y_{k+1..t}``.

    ``y`` holds raw readings with row ``i - 1`` at time ``i`` (shape ``(>= t, N)``);
    ``c`` is a scalar or per-sensor slope in signal units.
    """
    if t <= k:
        raise ValueError(f"need t > k, got k={k}, t={t}")
    if k < 0:
        raise ValueError("k must be >= 0")
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < t:
        raise ValueError(f"data holds {y.shape[0]} rows, need {t}")
    c = np.broadcast_to(np.asarray(c, dtype=float), (model.n_sensors,))
    if not np.all(np.isfinite(c)):
        raise ValueError("slope must be finite")
    lag = np.arange(1, t - k + 1, dtype=float)[:, None]
    dev = y[k:t] - model.mu
    terms = 2.0 * c * dev * lag - c * c * lag * lag
    return terms.sum(axis=0) / (2.0 * model.sigma**2)
