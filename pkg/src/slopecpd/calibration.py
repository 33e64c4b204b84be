"""Analytic average run length and detection delay of the window-limited mixture GLR.

The false-alarm approximation tilts the per-sensor soft-threshold ``g(Z)`` of a
standard normal ``Z``:

    psi(theta)   = log E exp(theta g(Z))
    gamma(theta) = theta^2 / 2 * E[g'(Z)^2 exp(theta g(Z) - psi(theta))]
    H(N, theta)  = theta sqrt(2 pi psi''(theta)) / (gamma(theta)^2 sqrt(N))
                   * exp(N (theta psi'(theta) - psi(theta)))

with ``theta`` solving ``psi'(theta) = b / N``.  Then

    ARL ~ H(N, theta) / int_{lo}^{hi} y nu(y sqrt(gamma))^2 dy,
    lo = sqrt(2N / sqrt(4w/3)),  hi = sqrt(2N / sqrt(4/3)).

All Gaussian expectations use adaptive Gauss-Kronrod quadrature (QUADPACK via
``scipy.integrate.quad``) on the half line, using the evenness of ``g``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, special

__all__ = [
    "CalibrationInput",
    "CalibrationResult",
    "EddInput",
    "THETA_BRACKET",
    "psi_and_derivatives",
    "gamma_coef",
    "expected_g",
    "solve_theta",
    "nu_approx",
    "h_factor",
    "arl_approx",
    "calibrate",
    "solve_threshold",
    "edd_bound",
    "first_order_edd",
    "conservative_threshold",
    "window_requirement",
]

THETA_BRACKET = (1e-6, 1.0 - 1e-6)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_QUAD = dict(limit=400, epsabs=0.0, epsrel=1e-12)


@dataclass(frozen=True)
class CalibrationInput:
    """Exactly one of ``threshold`` and ``arl`` is set."""

    n_sensors: int
    p0: float
    w: int
    threshold: float | None = None
    arl: float | None = None

    def __post_init__(self):
        if self.n_sensors < 1:
            raise ValueError("n_sensors must be >= 1")
        _check_p0(self.p0)
        if self.w < 1:
            raise ValueError("window must be >= 1")
        if (self.threshold is None) == (self.arl is None):
            raise ValueError("give exactly one of threshold and arl")
        target = self.threshold if self.threshold is not None else self.arl
        if not target > 0:
            raise ValueError("target must be positive")


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    theta: float
    psi: float
    psi_dot: float
    psi_ddot: float
    gamma_coef: float
    h_factor: float
    arl: float

    def to_record(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EddInput:
    b: float
    n_sensors: int
    p0: float
    delta_sq: float
    affected_count: int

    def __post_init__(self):
        _check_p0(self.p0)
        if not self.delta_sq > 0:
            raise ValueError("delta_sq must be positive")
        if not (1 <= self.affected_count <= self.n_sensors):
            raise ValueError("affected_count must lie in [1, n_sensors]")


def _check_p0(p0):
    if not (0.0 < p0 <= 1.0):
        raise ValueError(f"p0 must lie in (0, 1], got {p0}")


def _check_theta(theta):
    if not (0.0 < theta < 1.0):
        raise ValueError(f"theta must lie in (0, 1), the moment generating function diverges at 1; got {theta}")


def _g(x, p0):
    q = 0.5 * x * x
    return q + math.log(p0 + (1.0 - p0) * math.exp(-q))


def _g_dot(x, p0):
    return x * p0 / (p0 + (1.0 - p0) * math.exp(-0.5 * x * x))


def _log_tilted_density(x, theta, p0):
    # theta * g(x) - x^2 / 2, written so it never overflows
    q = 0.5 * x * x
    return -(1.0 - theta) * q + theta * math.log(p0 + (1.0 - p0) * math.exp(-q))


def _upper(theta):
    # integrand decays like exp(-(1 - theta) x^2 / 2); stop where that reaches e^-72
    return 12.0 / math.sqrt(1.0 - theta)


def _half_line(f, upper):
    val, _ = integrate.quad(f, 0.0, upper, **_QUAD)
    return 2.0 * _INV_SQRT_2PI * val


@lru_cache(maxsize=4096)
def _tilted(theta: float, p0: float) -> tuple[float, float, float, float]:
    upper = _upper(theta)
    m0 = _half_line(lambda x: math.exp(_log_tilted_density(x, theta, p0)), upper)
    psi = math.log(m0)

    def weight(x):
        return math.exp(_log_tilted_density(x, theta, p0) - psi)

    psi_dot = _half_line(lambda x: _g(x, p0) * weight(x), upper)
    psi_ddot = _half_line(lambda x: (_g(x, p0) - psi_dot) ** 2 * weight(x), upper)
    gdot2 = _half_line(lambda x: _g_dot(x, p0) ** 2 * weight(x), upper)
    return psi, psi_dot, psi_ddot, 0.5 * theta * theta * gdot2


def psi_and_derivatives(theta: float, p0: float) -> tuple[float, float, float]:
    """``psi(theta)`` and its first two derivatives as tilted moments of ``g(Z)``."""
    _check_theta(theta)
    _check_p0(p0)
    psi, d1, d2, _ = _tilted(float(theta), float(p0))
    return psi, d1, d2


def gamma_coef(theta: float, p0: float) -> float:
    _check_theta(theta)
    _check_p0(p0)
    return _tilted(float(theta), float(p0))[3]


@lru_cache(maxsize=256)
def expected_g(p0: float) -> float:
    """``E g(Z)`` for standard normal ``Z``; equals ``psi'(0)``."""
    _check_p0(p0)
    return _half_line(lambda x: _g(x, p0) * math.exp(-0.5 * x * x), 40.0)


def solve_theta(b: float, n_sensors: int, p0: float, tol: float = 1e-10) -> float:
    """Tilt ``theta`` with ``psi'(theta) = b / N`` (bracketed root search)."""
    _check_p0(p0)
    level = b / n_sensors
    lo, hi = THETA_BRACKET
    d_lo = psi_and_derivatives(lo, p0)[1]
    d_hi = psi_and_derivatives(hi, p0)[1]
    if not (d_lo < level < d_hi):
        raise ValueError(
            f"b/N = {level:.6g} is outside the attainable range ({d_lo:.6g}, {d_hi:.6g}) of psi' on the theta bracket"
        )
    theta = optimize.brentq(lambda th: psi_and_derivatives(th, p0)[1] - level, lo, hi, xtol=1e-15, maxiter=500)
    # absolute tolerance on the O(1) range of b/N, relative beyond it
    resid = abs(psi_and_derivatives(theta, p0)[1] - level)
    if resid > tol * max(1.0, level):
        raise ArithmeticError(f"theta root not resolved: |psi'(theta) - b/N| = {resid:.3g}")
    return theta


def nu_approx(x):
    """Closed-form approximation of the overshoot correction ``nu(x)``; ``nu(0+) = 1``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("nu is defined for x > 0")
    u = 0.5 * x
    cdf = special.ndtr(u)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    # Phi(u) - 1/2 via erf keeps full precision for small x
    half_gap = 0.5 * special.erf(u / math.sqrt(2.0))
    val = (2.0 / x) * half_gap / (u * cdf + pdf)
    return val[()] if val.ndim == 0 else val


def integration_limits(n_sensors: int, w: int) -> tuple[float, float]:
    if w < 1:
        raise ValueError("window must be >= 1")
    lo = math.sqrt(2.0 * n_sensors / math.sqrt(4.0 * w / 3.0))
    hi = math.sqrt(2.0 * n_sensors / math.sqrt(4.0 / 3.0))
    return lo, hi


def log_h_factor(n_sensors: int, theta: float, p0: float) -> float:
    psi, d1, d2 = psi_and_derivatives(theta, p0)
    gam = gamma_coef(theta, p0)
    return (math.log(theta) + 0.5 * math.log(2.0 * math.pi * d2) - 2.0 * math.log(gam)
            - 0.5 * math.log(n_sensors) + n_sensors * (theta * d1 - psi))


def h_factor(n_sensors: int, theta: float, p0: float) -> float:
    return math.exp(min(log_h_factor(n_sensors, theta, p0), 709.0))


def _nu_integral(n_sensors, w, gam):
    lo, hi = integration_limits(n_sensors, w)
    if hi == lo:
        return 0.0
    root_gam = math.sqrt(gam)
    val, _ = integrate.quad(lambda y: y * float(nu_approx(y * root_gam)) ** 2, lo, hi,
                            epsabs=0.0, epsrel=1e-10, limit=200)
    return val


def _log_arl(b, n_sensors, p0, w):
    theta = solve_theta(b, n_sensors, p0)
    integral = _nu_integral(n_sensors, w, gamma_coef(theta, p0))
    if integral <= 0:
        return math.inf
    return log_h_factor(n_sensors, theta, p0) - math.log(integral)


def calibrate_threshold(b: float, n_sensors: int, p0: float, w: int) -> CalibrationResult:
    """Every intermediate quantity of the ARL approximation at threshold ``b``.

    With ``w = 1`` the integration range is empty and the ARL is infinite.
    """
    theta = solve_theta(b, n_sensors, p0)
    psi, d1, d2 = psi_and_derivatives(theta, p0)
    gam = gamma_coef(theta, p0)
    log_arl = _log_arl(b, n_sensors, p0, w)
    arl = math.exp(log_arl) if log_arl < 709.0 else math.inf
    return CalibrationResult(b, theta, psi, d1, d2, gam, h_factor(n_sensors, theta, p0), arl)


def arl_approx(b: float, n_sensors: int, p0: float, w: int) -> float:
    """Approximate false-alarm ARL of the window-limited mixture GLR at threshold ``b``."""
    _check_p0(p0)
    if w < 1:
        raise ValueError("window must be >= 1")
    return calibrate_threshold(b, n_sensors, p0, w).arl


def _log_arl_at_theta(theta, n_sensors, p0, w):
    integral = _nu_integral(n_sensors, w, gamma_coef(theta, p0))
    if integral <= 0:
        return math.inf
    return log_h_factor(n_sensors, theta, p0) - math.log(integral)


def solve_threshold(arl: float, n_sensors: int, p0: float, w: int, rtol: float = 1e-4) -> float:
    """Threshold ``b`` whose approximate ARL equals ``arl``.

    The search runs over the tilt, ``b = N psi'(theta)``.  For small ``theta`` the
    approximation is not monotone (``H`` blows up like ``theta^-3``), so the
    root is taken on the increasing branch to the right of the minimum found
    by a coarse scan.
    """
    if arl < 100:
        raise ValueError("target ARL must be >= 100")
    _check_p0(p0)
    if w < 1:
        raise ValueError("window must be >= 1")
    target = math.log(arl)
    grid = np.linspace(0.02, 0.98, 49)
    vals = np.array([_log_arl_at_theta(th, n_sensors, p0, w) for th in grid])
    start = int(np.argmin(vals))
    for i in range(start, grid.size - 1):
        if vals[i] <= target < vals[i + 1]:
            break
    else:
        raise ValueError(f"target ARL {arl:g} not attainable for theta in {THETA_BRACKET}")
    theta = optimize.brentq(lambda th: _log_arl_at_theta(th, n_sensors, p0, w) - target,
                            grid[i], grid[i + 1], xtol=1e-14)
    b = n_sensors * psi_and_derivatives(theta, p0)[1]
    if abs(math.expm1(_log_arl(b, n_sensors, p0, w) - target)) > rtol:
        raise ArithmeticError("threshold search did not reach the requested ARL accuracy")
    return b


def calibrate(inp: CalibrationInput) -> CalibrationResult:
    b = inp.threshold
    if b is None:
        b = solve_threshold(inp.arl, inp.n_sensors, inp.p0, inp.w)
    return calibrate_threshold(b, inp.n_sensors, inp.p0, inp.w)


def window_requirement(b: float, delta_sq: float) -> float:
    """Smallest window for which the delay bound applies, ``(6 b / Delta^2)^(1/3)``."""
    return (6.0 * b / delta_sq) ** (1.0 / 3.0)


def _edd(numerator: float, inp: EddInput, w: int | None) -> float:
    if w is not None and not w > window_requirement(inp.b, inp.delta_sq):
        raise ValueError(
            f"window w={w} must exceed (6b/Delta^2)^(1/3) = {window_requirement(inp.b, inp.delta_sq):.4g}"
        )
    if numerator <= 0:
        raise ValueError(f"delay numerator is not positive ({numerator:.4g}); threshold too small")
    return (numerator / (inp.delta_sq / 6.0)) ** (1.0 / 3.0)


def edd_bound(inp: EddInput, w: int | None = None) -> float:
    """First-order upper bound on the delay when the change happens at time 0.

    Numerator ``b - |A| log p0 - (N - |A|) E g(Z)``.  With ``w`` the window
    precondition ``w > (6 b / Delta^2)^(1/3)`` is enforced.
    """
    eg = expected_g(inp.p0)
    num = inp.b - inp.affected_count * math.log(inp.p0) - (inp.n_sensors - inp.affected_count) * eg
    return _edd(num, inp, w)


def first_order_edd(inp: EddInput, w: int | None = None) -> float:
    """Variant of :func:`edd_bound` with ``N log p0`` in place of ``|A| log p0``."""
    eg = expected_g(inp.p0)
    num = inp.b - inp.n_sensors * math.log(inp.p0) - (inp.n_sensors - inp.affected_count) * eg
    return _edd(num, inp, w)


def conservative_threshold(gamma: float, n_sensors: int, w: int) -> float:
    """Threshold guaranteeing ARL >= ``gamma``: ``N/2 - 4 log(1 - (1 - 1/gamma)^(1/w))``."""
    if not gamma > 1:
        raise ValueError("gamma must exceed 1")
    if w < 1:
        raise ValueError("window must be >= 1")
    # 1 - (1 - 1/gamma)^(1/w) = -expm1(log1p(-1/gamma) / w)
    gap = -math.expm1(math.log1p(-1.0 / gamma) / w)
    return n_sensors / 2.0 - 4.0 * math.log(gap)
