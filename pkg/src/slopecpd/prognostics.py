"""Remaining-life prediction from detected degradation onsets.

Each system is monitored with a mixture detector.  At the alarm the estimated
onset ``k_hat`` and per-sensor slopes ``c_hat`` become regressors of a log
location-normal time-to-failure model:

    P(Y <= y) = Phi((log y - pi) / eta),   pi = beta_0 + sum_n beta_n c_hat_n

With ``eta`` fixed the likelihood in ``beta`` is maximized by least squares of
``log Y`` on the features.  The predicted whole life is ``k_hat + E[Y]`` with
the lognormal mean ``E[Y] = exp(pi + eta^2 / 2)``.

By default training and test systems get the same features, taken at the
alarm, so the regression sees slope estimates with the noise level it will
meet at prediction time.  Training systems are observed until failure, so
``refine=True`` instead re-estimates the onset from the whole run and uses all
post-onset data for the slopes.  Those features are nearly noise free and give
unbiased coefficients, but they do not match alarm-time test features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .detectors import DetectorConfig, make_detector
from .local_stats import a_tau, soft_threshold_g
from .model import SensorModel

__all__ = [
    "PrognosticModel",
    "SystemFeatures",
    "extract_features",
    "full_history_slopes",
    "refine_onset",
    "feature_matrix",
    "fit_ttf_model",
    "ttf_loglik",
    "predict_life",
    "relative_error",
    "ttf_cdf",
    "Cohort",
    "synthetic_cohort",
    "cohort_features",
    "evaluate_cohort",
]


@dataclass(frozen=True)
class PrognosticModel:
    beta: np.ndarray
    eta: float
    beta_se: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if beta.ndim != 1 or beta.size < 2:
            raise ValueError("beta needs an intercept and at least one slope coefficient")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        object.__setattr__(self, "beta", beta)

    @property
    def n_sensors(self) -> int:
        return self.beta.size - 1

    def location(self, c_hat) -> np.ndarray:
        c = np.asarray(c_hat, dtype=float)
        if c.shape[-1] != self.n_sensors:
            raise ValueError(f"expected {self.n_sensors} slope features, got {c.shape[-1]}")
        return self.beta[0] + c @ self.beta[1:]


@dataclass(frozen=True)
class SystemFeatures:
    """Detected onset, slope estimates and (training only) the time-to-failure after ``k_hat``."""

    k_hat: int
    c_hat: np.ndarray
    ttf: float | None = None
    stop_time: int | None = None

    def __post_init__(self):
        if self.ttf is not None and not self.ttf > 0:
            raise ValueError("ttf must be positive")


def extract_features(stream, config: DetectorConfig, model: SensorModel, kind: str = "glr",
                     failure_time: int | None = None, refine: bool = False) -> SystemFeatures | None:
    """Run a detector over ``stream`` (raw readings, row ``i`` at time ``i + 1``).

    Returns ``None`` when the detector never alarms (an unresolved system).
    With ``failure_time`` the system is treated as a training system with
    ``ttf = failure_time - k_hat``; ``refine`` re-estimates ``k_hat`` and the
    slopes from every row up to failure.
    """
    y = np.asarray(stream, dtype=float)
    horizon = y.shape[0] if failure_time is None else min(failure_time, y.shape[0])
    det = make_detector(kind, config, model=model)
    res = det.run(y[:horizon])
    if res is None:
        return None
    if failure_time is None:
        return SystemFeatures(res.k_hat, res.c_hat, None, res.stop_time)
    if not refine:
        return SystemFeatures(res.k_hat, res.c_hat, float(failure_time - res.k_hat), res.stop_time)
    lo = max(0, res.stop_time - config.w)
    k = refine_onset(y[:failure_time], model, config.p0, lo)
    c_full = full_history_slopes(y[:failure_time], k, model)
    return SystemFeatures(k, c_full, float(failure_time - k), res.stop_time)


def refine_onset(y, model: SensorModel, p0: float, lo: int = 0) -> int:
    """Earliest maximizer over ``lo <= k < T`` of ``sum_n g(U_{n,k,T})`` using every row of ``y``."""
    z = (np.asarray(y, dtype=float) - model.mu) / model.sigma
    T = z.shape[0]
    if not (0 <= lo < T):
        raise ValueError(f"lo must lie in [0, {T})")
    i = np.arange(1, T + 1, dtype=float)[:, None]
    # suffix sums over i > k of i z_i and z_i, so W_k = sum (i - k) z_i
    s_iz = np.cumsum((i * z)[::-1], axis=0)[::-1]
    s_z = np.cumsum(z[::-1], axis=0)[::-1]
    ks = np.arange(lo, T)
    W = s_iz[ks] - ks[:, None] * s_z[ks]
    U = W / np.sqrt(a_tau(T - ks).astype(float))[:, None]
    profile = soft_threshold_g(U, p0).sum(axis=1)
    return int(ks[int(np.argmax(profile))])


def full_history_slopes(y, k: int, model: SensorModel) -> np.ndarray:
    """Least-squares slope through the origin on ``(i - k, y_i - mu)`` for all ``i > k``."""
    y = np.asarray(y, dtype=float)
    tau = y.shape[0] - k
    if tau < 1:
        raise ValueError("no data after the onset")
    lag = np.arange(1, tau + 1, dtype=float)
    return lag @ (y[k:] - model.mu) / float(a_tau(tau))


def feature_matrix(features: list[SystemFeatures]) -> np.ndarray:
    """Rows ``[1, c_hat_1, ..., c_hat_N]``, shape ``(systems, N + 1)``."""
    c = np.array([f.c_hat for f in features], dtype=float)
    return np.column_stack([np.ones(len(features)), c])


def ttf_loglik(beta, eta: float, X, ttf) -> float:
    """Log-likelihood of the log location-normal model (density of ``Y``)."""
    logy = np.log(np.asarray(ttf, dtype=float))
    r = (logy - X @ beta) / eta
    return float(np.sum(-0.5 * r * r - math.log(eta) - 0.5 * math.log(2 * math.pi) - logy))


def fit_ttf_model(features: list[SystemFeatures], eta: float = 0.5, verify: bool = False) -> PrognosticModel:
    """Maximum likelihood ``beta`` at fixed ``eta`` (least squares on ``log ttf``).

    Only resolved training systems (``ttf`` set) may be passed.  With
    ``verify`` the least-squares solution is checked against a direct numerical
    maximization of :func:`ttf_loglik`.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if any(f.ttf is None for f in features):
        raise ValueError("every training system needs an observed ttf")
    X = feature_matrix(features)
    n_par = X.shape[1]
    if X.shape[0] < n_par + 1:
        raise ValueError(f"need at least {n_par + 1} resolved systems, got {X.shape[0]}")
    if np.linalg.matrix_rank(X) < n_par:
        raise np.linalg.LinAlgError("feature matrix is rank deficient (a constant or collinear slope feature)")
    logy = np.log([f.ttf for f in features])
    beta, *_ = np.linalg.lstsq(X, logy, rcond=None)
    se = eta * np.sqrt(np.diag(np.linalg.inv(X.T @ X)))
    if verify:
        res = optimize.minimize(lambda b: -ttf_loglik(b, eta, X, [f.ttf for f in features]),
                                np.zeros(n_par), method="BFGS",
                                jac=lambda b: -(X.T @ (logy - X @ b)) / eta**2,
                                options={"gtol": 1e-10, "maxiter": 10_000})
        if not np.allclose(res.x, beta, rtol=0, atol=1e-6 * max(1.0, np.abs(beta).max())):
            raise ArithmeticError("least-squares and likelihood maximizers disagree")
    return PrognosticModel(beta, eta, se)


def ttf_cdf(y, location, eta: float):
    return special.ndtr((np.log(y) - location) / eta)


def predict_life(features, model: PrognosticModel):
    """``k_hat + exp(pi + eta^2 / 2)`` for one system or a list of systems."""
    if isinstance(features, SystemFeatures):
        return features.k_hat + math.exp(float(model.location(features.c_hat)) + 0.5 * model.eta**2)
    return np.array([predict_life(f, model) for f in features])


def relative_error(predicted, actual):
    actual_arr = np.asarray(actual, dtype=float)
    if np.any(actual_arr <= 0):
        raise ValueError("actual life must be positive")
    out = np.abs(np.asarray(predicted, dtype=float) - actual_arr) / actual_arr
    return out[()] if out.ndim == 0 else out


# -- synthetic cohort ---------------------------------------------------------

@dataclass
class Cohort:
    """Run-to-failure streams with ground truth.

    ``streams[j]`` has ``failure[j]`` rows; onset ``kappa[j]``, slopes ``rates[j]``.
    """

    streams: list
    failure: np.ndarray
    kappa: np.ndarray
    rates: np.ndarray
    beta: np.ndarray
    eta: float
    model: SensorModel


def synthetic_cohort(n_systems: int, beta, eta: float, n_sensors: int = 21, n_affected: int = 7,
                     rate_range=(0.03, 0.08), kappa_range=(100, 200), seed: int = 0) -> Cohort:
    """Systems with slopes on a fixed affected subset and lognormal post-onset life.

    ``log(failure - kappa) = beta_0 + sum_n beta_n c_n + eta * eps`` with the true slopes ``c``.
    The affected sensors are the first ``n_affected``.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.size != n_sensors + 1:
        raise ValueError("beta must have n_sensors + 1 entries")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    model = SensorModel.standard(n_sensors)
    streams, failure, kappas, rates = [], [], [], []
    for _ in range(n_systems):
        kappa = int(rng.integers(kappa_range[0], kappa_range[1] + 1))
        c = np.zeros(n_sensors)
        c[:n_affected] = rng.uniform(*rate_range, size=n_affected)
        ttf = math.exp(beta[0] + beta[1:] @ c + eta * rng.standard_normal())
        life = kappa + max(1, int(round(ttf)))
        t = np.arange(1, life + 1)
        y = rng.standard_normal((life, n_sensors)) + np.maximum(t - kappa, 0)[:, None] * c[None, :]
        streams.append(y)
        failure.append(life)
        kappas.append(kappa)
        rates.append(c)
    return Cohort(streams, np.array(failure), np.array(kappas), np.array(rates), beta, eta, model)


def cohort_features(cohort: Cohort, config: DetectorConfig, kind: str = "glr", training: bool = True,
                    refine: bool = False):
    """Features of every resolved system and the indices of the unresolved ones."""
    feats, unresolved = [], []
    for j, (y, life) in enumerate(zip(cohort.streams, cohort.failure)):
        f = extract_features(y, config, cohort.model, kind,
                             failure_time=int(life) if training else None, refine=refine)
        if f is None:
            unresolved.append(j)
        else:
            feats.append((j, f))
    return feats, unresolved


def evaluate_cohort(train: Cohort, test: Cohort, config: DetectorConfig, eta: float | None = None,
                    kind: str = "glr", refine: bool = False) -> dict:
    """Fit on ``train`` and predict the whole life of every resolved test system."""
    eta = train.eta if eta is None else eta
    train_feats, unresolved_train = cohort_features(train, config, kind, True, refine)
    model = fit_ttf_model([f for _, f in train_feats], eta)
    test_feats, unresolved_test = cohort_features(test, config, kind, False)
    preds = [predict_life(f, model) for _, f in test_feats]
    actual = [float(test.failure[j]) for j, _ in test_feats]
    errors = relative_error(np.array(preds), np.array(actual))
    return {
        "model": model,
        "predicted": np.array(preds),
        "actual": np.array(actual),
        "relative_error": errors,
        "median_error": float(np.median(errors)) if errors.size else math.nan,
        "unresolved_train": len(unresolved_train),
        "unresolved_test": len(unresolved_test),
    }
