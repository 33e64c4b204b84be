"""Monte Carlo harness: run lengths, detection delays, change-point errors and
threshold matching.

Every trial owns one :class:`TrialRunner`.  Its noise comes from the per-(trial,
sensor) streams of :class:`slopecpd.model.NoiseSource`, drawn in blocks and fed
to the compiled loop in :mod:`slopecpd._kernels`.  Results therefore depend
only on ``(master_seed, trial)`` and never on block sizes, worker count or
scheduling.

With ``ladder=True`` a runner records each new running maximum of the
statistic.  The alarm time for every threshold up to the largest recorded value
can then be read off one simulation, which is how :func:`arl_curve` and
:func:`match_thresholds` avoid re-simulating for each candidate ``b``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import _kernels as K
from .calibration import solve_threshold
from .detectors import AdaptiveParams, DetectorConfig
from .local_stats import a_tau
from .model import NoiseSource

__all__ = [
    "TrialReport",
    "SummaryStats",
    "MatchResult",
    "CpeResult",
    "TrialRunner",
    "summarize",
    "simulate_arl",
    "arl_curve",
    "simulate_edd",
    "simulate_cpe_mse",
    "match_thresholds",
    "compare_adaptive",
    "config_hash",
    "summary_rows",
    "write_summary_csv",
]

# stream index used for per-trial affected-subset draws; sensor streams use 0..N-1
SUBSET_STREAM = 2**32
DEFAULT_BLOCK = 256


@dataclass(frozen=True)
class TrialReport:
    trial: int
    seed: int
    stop_time: int
    k_hat: int
    alarmed_before_cap: bool


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    standard_error: float
    trial_count: int
    censored_count: int

    def __post_init__(self):
        if self.standard_error < 0 or self.censored_count > self.trial_count:
            raise ValueError("inconsistent summary")


@dataclass(frozen=True)
class MatchResult:
    b: float
    arl: SummaryStats
    rounds: int
    seed_b: float


@dataclass(frozen=True)
class CpeResult:
    """Squared change-point error over trials that alarmed after the change."""

    mse: float
    standard_error: float
    used: int
    false_alarms: int
    censored: int


def summarize(values, censored: int = 0) -> SummaryStats:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return SummaryStats(math.nan, math.nan, 0, 0)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return SummaryStats(float(v.mean()), se, int(v.size), int(censored))


@lru_cache(maxsize=16)
def _tables(w: int):
    a = np.zeros(w + 1)
    a[1:] = a_tau(np.arange(1, w + 1))
    sqrt_a = np.sqrt(a)
    inv2a = np.zeros(w + 1)
    inv2a[1:] = 1.0 / (2.0 * a[1:])
    inv2tau = np.zeros(w + 1)
    inv2tau[1:] = 1.0 / (2.0 * np.arange(1, w + 1))
    for arr in (a, sqrt_a, inv2a, inv2tau):
        arr.setflags(write=False)
    return a, sqrt_a, inv2a, inv2tau


class TrialRunner:
    """One simulated stream processed by a compiled detector.

    ``rates`` are post-change slopes in signal units (length N, zeros for
    unaffected sensors) applied from ``kappa + 1`` on; ``kappa=None`` means no
    change.  ``sigma`` scales independent noise, ``cov`` replaces it with
    correlated noise; residuals are standardized with ``sigma`` (or the
    square root of the covariance diagonal).
    """

    def __init__(self, kind: str, config: DetectorConfig, n_sensors: int, master_seed: int, trial: int, *,
                 rates=None, kappa: int | None = None, sigma=None, cov=None, thresholds=None,
                 ladder: bool = False, block: int = DEFAULT_BLOCK, margin: float = 1e-6):
        if kind not in K.KIND_CODES:
            raise ValueError(f"unknown detector kind {kind!r}")
        self.kind = kind
        self.code = K.KIND_CODES[kind]
        self.config = config
        self.n_sensors = n = n_sensors
        self.trial = trial
        self.master_seed = master_seed
        self.block = block
        self.margin = margin
        w = config.w

        self.W = np.zeros((w, n))
        self.S = np.zeros((w, n)) if kind == "meanshift" else np.zeros((1, 1))
        self.kslot = np.full(w, -1, dtype=np.int64)
        self.tables = _tables(w)

        if kind == "adaptive":
            params = config.adaptive or AdaptiveParams()
            self.adapt = np.array([params.alpha, params.beta, params.a], dtype=float)
            p0_floor = params.alpha / (params.alpha + params.beta + 1.0)
            p = np.full(n, p0_floor)
        else:
            self.adapt = np.zeros(3)
            p = np.full(n, config.p0)
            p0_floor = config.p0
        self.p = p
        self.omp = 1.0 - p
        with np.errstate(divide="ignore"):
            self.logp = np.log(p)
            self.log1mp = np.log1p(-p)

        if kind in ("cusum", "multichart"):
            if config.nominal_rates is None:
                raise ValueError(f"{kind} needs nominal_rates")
            self.nominal = np.broadcast_to(config.nominal_rates, (n,)).astype(float)
        else:
            self.nominal = np.zeros(n)
        self.hr2 = 0.5 * self.nominal * self.nominal

        h = np.broadcast_to(np.asarray(config.b if thresholds is None else thresholds, dtype=float), (n,)).copy()
        self.thresholds = h
        self.equal_h = bool(np.all(h == h[0]))
        self.fast_ok, self.qcap, self.chunk = K.fast_path_settings(self.code, p0_floor, float(np.min(self.omp)))

        self.kappa = kappa
        self.rates = None if rates is None else np.broadcast_to(np.asarray(rates, dtype=float), (n,)).copy()
        if cov is not None:
            cov = np.asarray(cov, dtype=float)
            self.sigma = np.sqrt(np.diag(cov))
        else:
            self.sigma = np.ones(n) if sigma is None else np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
        self.noise = NoiseSource(master_seed, n, trial, scale=None if cov is not None else self.sigma, cov=cov)
        self._pending = np.empty((0, n))
        self._drawn = 0

        self.ladder = ladder
        self.lad_t = np.zeros(64 if ladder else 1, dtype=np.int64)
        self.lad_v = np.zeros_like(self.lad_t, dtype=float)
        self.lad_k = np.zeros_like(self.lad_t)
        self.st = np.zeros(2, dtype=np.int64)
        self.fst = np.array([-math.inf, math.nan])
        self.out = np.array([0, -1], dtype=np.int64)
        self.per_sensor = np.zeros(n)
        self.prof = np.zeros(w)
        self.alarm_time: int | None = None
        self.k_hat = -1
        self.b_reached = -math.inf

    @property
    def t(self) -> int:
        return int(self.st[0])

    def _draw(self):
        m = self.block
        z = self.noise.draw(m)
        if self.rates is not None and self.kappa is not None:
            times = np.arange(self._drawn + 1, self._drawn + m + 1)
            elapsed = np.maximum(times - self.kappa, 0).astype(float)
            z += elapsed[:, None] * self.rates[None, :]
        self._drawn += m
        return z / self.sigma

    def advance(self, b_stop: float, cap: int) -> "TrialRunner":
        """Run until the statistic reaches ``b_stop`` or ``t == cap``.

        May be called again with a larger ``b_stop`` to continue the same stream.
        """
        if self.code == K.MULTICHART and not self.equal_h:
            b_stop = 0.0  # statistic is the largest excess over per-sensor thresholds
        a_table, sqrt_a, inv2a, inv2tau = self.tables
        self.alarm_time = None
        if self.ladder and self.st[1] > 0 and self.lad_v[self.st[1] - 1] >= b_stop:
            self.b_reached = max(self.b_reached, b_stop)
            return self
        while self.t < cap:
            if self._pending.shape[0] == 0:
                self._pending = self._draw()
            rows = self._pending[: cap - self.t]
            code = K.run_block(
                self.code, rows, self.W, self.S, self.kslot, a_table, sqrt_a, inv2a, inv2tau,
                self.p, self.omp, self.logp, self.log1mp, self.adapt, self.nominal, self.hr2,
                self.thresholds, self.equal_h, float(b_stop), self.margin, self.fast_ok, self.qcap, self.chunk,
                self.ladder, self.lad_t, self.lad_v, self.lad_k, self.st, self.fst, self.out, self.per_sensor, self.prof,
            )
            self._pending = self._pending[int(self.out[0]):]
            if code == K.ALARM:
                self.alarm_time = self.t
                self.k_hat = int(self.out[1])
                self.b_reached = max(self.b_reached, b_stop)
                return self
            if code == K.LADDER_FULL:
                self._grow()
        return self

    def _grow(self):
        size = 2 * self.lad_t.size
        for name in ("lad_t", "lad_v", "lad_k"):
            old = getattr(self, name)
            new = np.zeros(size, dtype=old.dtype)
            new[: old.size] = old
            setattr(self, name, new)

    def ladder_view(self):
        n = int(self.st[1])
        return self.lad_t[:n], self.lad_v[:n], self.lad_k[:n]

    def stop_time(self, b: float, cap: int) -> tuple[int, int, bool]:
        """``(stop_time, k_hat, alarmed)`` for threshold ``b`` from the ladder."""
        if not self.ladder:
            raise RuntimeError("stop_time(b) needs a runner created with ladder=True")
        lt, lv, lk = self.ladder_view()
        i = int(np.searchsorted(lv, b, side="left"))
        if i < lv.size:
            return int(lt[i]), int(lk[i]), True
        if self.t >= cap:
            return cap, -1, False
        raise RuntimeError(f"trial {self.trial} has not been simulated up to b={b:g}")

    def report(self, cap: int) -> TrialReport:
        if self.alarm_time is not None:
            return TrialReport(self.trial, self.master_seed, self.alarm_time, self.k_hat, True)
        return TrialReport(self.trial, self.master_seed, cap, -1, False)


# -- trial scheduling ---------------------------------------------------------

def _subset_rates(master_seed, trial, n_sensors, rate_values):
    """Per-trial slope vector with the affected subset drawn uniformly without replacement."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(trial, SUBSET_STREAM))))
    chosen = rng.choice(n_sensors, size=len(rate_values), replace=False)
    c = np.zeros(n_sensors)
    c[chosen] = rate_values
    return c


def _run_trials(job):
    kind, config, n_sensors, seed, trials, cap, scenario, thresholds = job
    reports = []
    for trial in trials:
        rates, kappa = None, None
        if scenario is not None:
            rate_values, kappa, redraw = scenario
            if redraw:
                rates = _subset_rates(seed, trial, n_sensors, rate_values)
            else:
                rates = np.asarray(rate_values, dtype=float)
        runner = TrialRunner(kind, config, n_sensors, seed, trial, rates=rates, kappa=kappa, thresholds=thresholds)
        runner.advance(config.b, cap)
        reports.append(runner.report(cap))
    return reports


def _dispatch(kind, config, n_sensors, seed, trials, cap, scenario=None, thresholds=None, n_jobs=1):
    indices = list(range(trials))
    if n_jobs <= 1 or trials < 2:
        return _run_trials((kind, config, n_sensors, seed, indices, cap, scenario, thresholds))
    chunks = [indices[i::n_jobs] for i in range(n_jobs)]
    jobs = [(kind, config, n_sensors, seed, ch, cap, scenario, thresholds) for ch in chunks if ch]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        parts = list(pool.map(_run_trials, jobs))
    merged = [r for part in parts for r in part]
    merged.sort(key=lambda r: r.trial)
    return merged


def _stats(reports) -> SummaryStats:
    return summarize([r.stop_time for r in reports], sum(not r.alarmed_before_cap for r in reports))


# -- public simulations -------------------------------------------------------

def simulate_arl(config: DetectorConfig, n_sensors: int, trials: int = 500, cap: int = 100_000,
                 master_seed: int = 0, kind: str = "glr", n_jobs: int = 1, thresholds=None,
                 return_reports: bool = False):
    """Mean run length on no-change streams.

    Censored trials (no alarm by ``cap``) enter the mean as ``cap`` and are counted.
    """
    reports = _dispatch(kind, config, n_sensors, master_seed, trials, cap, thresholds=thresholds, n_jobs=n_jobs)
    stats = _stats(reports)
    return (stats, reports) if return_reports else stats


def _ladder_runners(kind, config, n_sensors, seed, trials, thresholds=None, scenario=None):
    runners = []
    for trial in range(trials):
        rates, kappa = None, None
        if scenario is not None:
            rate_values, kappa, redraw = scenario
            rates = _subset_rates(seed, trial, n_sensors, rate_values) if redraw else rate_values
        runners.append(TrialRunner(kind, config, n_sensors, seed, trial, rates=rates, kappa=kappa,
                                   thresholds=thresholds, ladder=True))
    return runners


def _curve_from(runners, b_values, cap):
    out = []
    for b in b_values:
        times, cens = [], 0
        for r in runners:
            t, _, ok = r.stop_time(b, cap)
            times.append(t)
            cens += not ok
        out.append(summarize(times, cens))
    return out


def arl_curve(config: DetectorConfig, n_sensors: int, b_values, trials: int = 500, cap: int = 100_000,
              master_seed: int = 0, kind: str = "glr") -> list[SummaryStats]:
    """Simulated ARL at several thresholds from one set of ladder runs.

    ``config.b`` is ignored; each trial runs until its statistic passes
    ``max(b_values)``.  The value at each ``b`` equals what :func:`simulate_arl`
    returns with that threshold and the same seed.
    """
    b_values = list(b_values)
    runners = _ladder_runners(kind, config, n_sensors, master_seed, trials)
    top = max(b_values)
    for r in runners:
        r.advance(top, cap)
    return _curve_from(runners, b_values, cap)


def simulate_edd(config: DetectorConfig, n_sensors: int, rate_values, trials: int = 500, master_seed: int = 0,
                 kind: str = "glr", cap: int = 100_000, redraw: bool = True, n_jobs: int = 1,
                 thresholds=None, return_reports: bool = False):
    """Mean stopping time when the change happens at time 0.

    ``rate_values`` holds one slope (signal units, unit noise) per affected
    sensor; with ``redraw`` the affected subset is drawn anew for each trial,
    otherwise ``rate_values`` must be the full length-N slope vector.
    """
    rate_values = np.asarray(rate_values, dtype=float)
    if not redraw and rate_values.shape != (n_sensors,):
        raise ValueError("without redraw, rate_values must have one entry per sensor")
    if redraw and rate_values.size > n_sensors:
        raise ValueError("more affected sensors than sensors")
    reports = _dispatch(kind, config, n_sensors, master_seed, trials, cap,
                        scenario=(rate_values, 0, redraw), thresholds=thresholds, n_jobs=n_jobs)
    stats = _stats(reports)
    return (stats, reports) if return_reports else stats


def simulate_cpe_mse(detectors: dict, n_sensors: int, rate_values, kappa: int, trials: int = 500,
                     master_seed: int = 0, cap: int | None = None) -> dict[str, CpeResult]:
    """Mean squared error of ``k_hat`` for several detectors on common streams.

    ``detectors`` maps a name to ``(kind, config)`` or ``(kind, config, thresholds)``.
    Every detector sees the same noise and affected subset in a given trial.
    Alarms at or before ``kappa`` are false alarms: counted, not scored.
    """
    if kappa < 1:
        raise ValueError("kappa must be >= 1 for change-point estimation")
    rate_values = np.asarray(rate_values, dtype=float)
    results = {}
    for name, entry in detectors.items():
        kind, config = entry[0], entry[1]
        thresholds = entry[2] if len(entry) > 2 else None
        horizon = cap if cap is not None else kappa + 20 * config.w
        errs, false_alarms, censored = [], 0, 0
        for trial in range(trials):
            rates = _subset_rates(master_seed, trial, n_sensors, rate_values)
            r = TrialRunner(kind, config, n_sensors, master_seed, trial, rates=rates, kappa=kappa,
                            thresholds=thresholds)
            r.advance(config.b, horizon)
            if r.alarm_time is None:
                censored += 1
            elif r.alarm_time <= kappa:
                false_alarms += 1
            else:
                errs.append(float(r.k_hat - kappa) ** 2)
        s = summarize(errs)
        results[name] = CpeResult(s.mean, s.standard_error, s.trial_count, false_alarms, censored)
    return results


def _mean_at(runners, b, cap):
    return float(np.mean([r.stop_time(b, cap)[0] for r in runners]))


def match_thresholds(detectors: dict, n_sensors: int, target_arl: float = 5000.0, trials: int = 500,
                     tolerance: float = 0.05, cap: int | None = None, master_seed: int = 0,
                     max_rounds: int = 5, seeds: dict | None = None) -> dict[str, MatchResult]:
    """Thresholds giving simulated ARL ``target_arl`` for each detector.

    ``detectors`` maps a name to ``(kind, config)`` or ``(kind, config, thresholds)``.
    The search starts from ``seeds[name]`` (default: the analytic threshold of
    the mixture GLR) and raises the ladder ceiling at most ``max_rounds`` times.
    The returned ``b`` is the smallest value whose simulated ARL on the common
    streams is at least the target.
    """
    if target_arl < 100:
        raise ValueError("target ARL must be >= 100")
    cap = int(cap if cap is not None else 20 * target_arl)
    seeds = dict(seeds or {})
    out = {}
    for name, entry in detectors.items():
        kind, config = entry[0], entry[1]
        thresholds = entry[2] if len(entry) > 2 else None
        if name in seeds:
            b0 = float(seeds[name])
        elif kind in ("glr", "meanshift", "adaptive", "cusum"):
            b0 = solve_threshold(target_arl, n_sensors, config.p0, config.w)
        else:
            b0 = math.log(target_arl * n_sensors)
        runners = _ladder_runners(kind, config, n_sensors, master_seed, trials, thresholds=thresholds)
        b_hi = b0
        history = []
        for rounds in range(1, max_rounds + 1):
            for r in runners:
                r.advance(b_hi, cap)
            arl_hi = _mean_at(runners, b_hi, cap)
            history.append((b_hi, arl_hi))
            if arl_hi >= target_arl:
                break
            b_hi = _next_ceiling(history, target_arl)
        else:
            raise RuntimeError(f"{name}: simulated ARL {history[-1][1]:.4g} below target after {max_rounds} rounds")
        b = _invert(runners, target_arl, b_hi, cap)
        stats = _curve_from(runners, [b], cap)[0]
        if abs(stats.mean - target_arl) > tolerance * target_arl:
            raise RuntimeError(f"{name}: matched ARL {stats.mean:.4g} outside tolerance")
        out[name] = MatchResult(b, stats, rounds, b0)
    return out


def _next_ceiling(history, target):
    b, arl = history[-1]
    if len(history) >= 2 and history[-1][1] > history[-2][1]:
        (b1, a1), (b2, a2) = history[-2], history[-1]
        slope = (math.log(a2) - math.log(a1)) / (b2 - b1)
    else:
        slope = 0.5  # log ARL per unit b; a rough prior for the first extrapolation
    return b + min(max((math.log(target) - math.log(arl)) / slope, 0.05), 5.0) * 1.05 + 0.02


def _invert(runners, target, b_hi, cap):
    values = np.unique(np.concatenate([r.ladder_view()[1] for r in runners]))
    values = values[values <= b_hi]
    lo, hi = 0, values.size - 1
    if _mean_at(runners, values[hi], cap) < target:
        return float(b_hi)
    while lo < hi:
        mid = (lo + hi) // 2
        if _mean_at(runners, values[mid], cap) >= target:
            hi = mid
        else:
            lo = mid + 1
    return float(values[lo])


def compare_adaptive(n_sensors: int = 100, n_affected: int = 10, rates_grid=(0.01, 0.03, 0.05, 0.07, 0.09),
                     p0: float = 0.3, w: int = 200, params: AdaptiveParams | None = None,
                     target_arl: float = 5000.0, trials: int = 500, master_seed: int = 0,
                     thresholds: dict | None = None, match_trials: int | None = None) -> list[dict]:
    """EDD of the fixed-``p0`` and adaptive mixture procedures over a slope grid.

    Thresholds are matched to ``target_arl`` by simulation unless ``thresholds``
    supplies ``{"fixed": b, "adaptive": b}``.
    """
    params = params or AdaptiveParams()
    fixed_cfg = DetectorConfig(b=0.0, p0=p0, w=w)
    adapt_cfg = DetectorConfig(b=0.0, p0=p0, w=w, adaptive=params)
    if thresholds is None:
        rho_lo = params.alpha / (params.alpha + params.beta + 1.0)
        matched = match_thresholds(
            {"fixed": ("glr", fixed_cfg), "adaptive": ("adaptive", adapt_cfg)}, n_sensors, target_arl,
            trials=match_trials or trials, master_seed=master_seed + 1,
            seeds={"adaptive": solve_threshold(target_arl, n_sensors, rho_lo, w)},
        )
        thresholds = {k: v.b for k, v in matched.items()}
    rows = []
    for c in rates_grid:
        row = {"c": float(c)}
        for name, kind, cfg in (("fixed", "glr", fixed_cfg), ("adaptive", "adaptive", adapt_cfg)):
            cfg_b = DetectorConfig(b=thresholds[name], p0=cfg.p0, w=cfg.w, adaptive=cfg.adaptive)
            s = simulate_edd(cfg_b, n_sensors, np.full(n_affected, c), trials, master_seed, kind=kind)
            row[f"edd_{name}"] = s.mean
            row[f"se_{name}"] = s.standard_error
            row[f"b_{name}"] = thresholds[name]
        rows.append(row)
    return rows


# -- reporting ----------------------------------------------------------------

def config_hash(obj) -> str:
    """Short stable hash of a JSON-serializable configuration."""
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        raise TypeError(type(o).__name__)

    blob = json.dumps(obj, sort_keys=True, default=default).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def summary_rows(config, metrics: dict[str, SummaryStats]) -> list[dict]:
    h = config_hash(config)
    return [
        {"config": h, "metric": name, "mean": s.mean, "stderr": s.standard_error,
         "trials": s.trial_count, "censored": s.censored_count}
        for name, s in metrics.items()
    ]


def write_summary_csv(rows: list[dict], path=None) -> str:
    """CSV with columns config, metric, mean, stderr, trials, censored; returns the text."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["config", "metric", "mean", "stderr", "trials", "censored"],
                            lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "mean": repr(float(row["mean"])), "stderr": repr(float(row["stderr"]))})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
