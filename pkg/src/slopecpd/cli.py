"""``slopecpd`` command line.

Subcommands: detect, calibrate, simulate, whiten, detrend, prognose.  Every
option can also come from a flat JSON file (``--config``, keys in
:data:`slopecpd.io.CONFIG_KEYS`); flags win over the file.  The default seed
is read from ``SLOPECPD_SEED``.

Exit codes: 0 success (for ``detect``: alarm raised), 1 ``detect`` reached the
end of the stream without an alarm, 2 input or parameter error.  Errors are
one line on stderr starting with ``slopecpd: error:``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationInput, calibrate, solve_threshold
from .detectors import DETECTOR_KINDS, AdaptiveParams, DetectorConfig, make_detector
from .io import (InputError, emit_series, read_config, read_model_csv, read_stream_csv,
                 write_stream_csv)
from .model import SensorModel, load_covariance, load_scenario, scenario_array
from .montecarlo import (SummaryStats, arl_curve, simulate_arl, simulate_cpe_mse, simulate_edd, summary_rows,
                         write_summary_csv)
from .preprocess import build_whitener, detrend_linear, unwhiten, whiten
from .prognostics import (PrognosticModel, SystemFeatures, extract_features, fit_ttf_model,
                          predict_life, relative_error)

SEED_ENV = "SLOPECPD_SEED"
EXIT_ALARM, EXIT_NO_ALARM, EXIT_INPUT = 0, 1, 2
ANALYTIC_KINDS = ("glr",)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message.replace("\n", " "))


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    if isinstance(text, (int, float)):
        return [float(text)]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from None


class Settings:
    """Flag value, else config-file value, else default."""

    def __init__(self, args):
        self.args = args
        self.file = read_config(args.config) if getattr(args, "config", None) else {}

    def get(self, key, default=None):
        v = getattr(self.args, key, None)
        if v is not None:
            return v
        return self.file.get(key, default)

    def seed(self) -> int:
        v = self.get("seed")
        if v is None:
            env = os.environ.get(SEED_ENV)
            if env is None or not env.strip():
                return 0
            v = env
        try:
            seed = int(v)
        except (TypeError, ValueError):
            raise InputError(f"seed must be an integer, got {v!r}") from None
        if seed < 0:
            raise InputError("seed must be non-negative")
        return seed


def _threshold(s: Settings, n_sensors: int, kind: str, p0: float, w: int) -> float:
    """Flag --threshold, flag --arl, config threshold, config arl, then ARL 5000."""
    if s.args.threshold is not None:
        return s.args.threshold
    arl = getattr(s.args, "arl", None)
    if arl is None:
        if "threshold" in s.file:
            if "arl" in s.file:
                raise InputError("config sets both threshold and arl")
            return s.file["threshold"]
        arl = s.file.get("arl", 5000.0)
    if kind not in ANALYTIC_KINDS:
        raise InputError(f"--threshold is required for kind {kind!r} (the ARL approximation covers glr only)")
    try:
        return solve_threshold(float(arl), n_sensors, p0, w)
    except (ValueError, ArithmeticError) as exc:
        raise InputError(str(exc)) from None


def _detector_config(s: Settings, n_sensors: int, kind: str, b=None) -> DetectorConfig:
    p0 = float(s.get("p0", 0.3))
    w = int(s.get("window", 200))
    if b is None:
        b = _threshold(s, n_sensors, kind, p0, w)
    rates = s.get("nominal_rates")
    if rates is not None:
        rates = np.array(_floats(rates))
        if rates.size not in (1, n_sensors):
            raise InputError(f"nominal_rates needs 1 or {n_sensors} values, got {rates.size}")
    elif kind in ("cusum", "multichart"):
        raise InputError(f"kind {kind!r} needs --nominal-rates")
    adaptive = None
    if kind == "adaptive":
        adaptive = AdaptiveParams(float(s.get("alpha", 1.0)), float(s.get("beta", 1.0)), float(s.get("a", 2.0)))
    return DetectorConfig(b=float(b), p0=p0, w=w, nominal_rates=rates, adaptive=adaptive)


def _kind(s: Settings) -> str:
    kind = s.get("kind", "glr")
    if kind not in DETECTOR_KINDS:
        raise InputError(f"unknown kind {kind!r}; choose from {sorted(DETECTOR_KINDS)}")
    return kind


def _model(s: Settings, n_sensors: int) -> SensorModel:
    path = s.get("model")
    if path is None:
        return SensorModel.standard(n_sensors)
    model = read_model_csv(path)
    if model.n_sensors != n_sensors:
        raise InputError(f"model file has {model.n_sensors} sensors, stream has {n_sensors}")
    return model


def _out(path):
    if path is None or path == "-":
        return sys.stdout, False
    try:
        return open(path, "w", encoding="utf-8", newline=""), True
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from None


# -- detect -------------------------------------------------------------------

def run_detect(args) -> int:
    s = Settings(args)
    stream = read_stream_csv(args.stream)
    kind = _kind(s)
    model = _model(s, stream.n_sensors)
    config = _detector_config(s, stream.n_sensors, kind)
    det = make_detector(kind, config, model=model)
    fh, close = _out(args.output)
    try:
        result = None
        for i, row in enumerate(stream.values):
            status = det.observe(row)
            if args.trace:
                fh.write(json.dumps({"event": "trace", "step": status.t, "t": float(stream.t[i]),
                                     "statistic": status.statistic}) + "\n")
            if status.alarmed:
                result = det.changepoint()
                break
        if result is None:
            fh.write(json.dumps({"event": "no_alarm", "steps": len(stream), "threshold": config.b}) + "\n")
            return EXIT_NO_ALARM
        rec = {"event": "alarm", **result.to_record(), "t": float(stream.t[result.stop_time - 1]),
               "threshold": config.b, "kind": kind}
        fh.write(json.dumps(rec) + "\n")
        return EXIT_ALARM
    finally:
        if close:
            fh.close()


# -- calibrate ----------------------------------------------------------------

def run_calibrate(args) -> int:
    s = Settings(args)
    n = s.get("n_sensors")
    if n is None:
        raise InputError("--n-sensors is required")
    threshold, arl = s.get("threshold"), s.get("arl")
    if args.threshold is not None:
        arl = None
    elif args.arl is not None:
        threshold = None
    try:
        inp = CalibrationInput(int(n), float(s.get("p0", 0.3)), int(s.get("window", 200)),
                               threshold=None if threshold is None else float(threshold),
                               arl=None if arl is None else float(arl))
        res = calibrate(inp)
    except (ValueError, ArithmeticError) as exc:
        raise InputError(str(exc)) from None
    fh, close = _out(args.output)
    fh.write(json.dumps({"n_sensors": inp.n_sensors, "p0": inp.p0, "window": inp.w, **res.to_record()}) + "\n")
    if close:
        fh.close()
    return 0


# -- simulate -----------------------------------------------------------------

def _trial_log(reports, label):
    for r in reports:
        sys.stderr.write(json.dumps({"run": label, "trial": r.trial, "seed": r.seed, "stop_time": r.stop_time,
                                     "k_hat": r.k_hat, "alarmed_before_cap": r.alarmed_before_cap}) + "\n")


def run_simulate(args) -> int:
    s = Settings(args)
    seed = s.seed()
    if args.metric == "stream":
        if args.scenario is None:
            raise InputError("simulate stream needs --scenario")
        try:
            scenario, file_seed = load_scenario(args.scenario)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"{args.scenario}: {exc}") from None
        if args.seed is None and s.file.get("seed") is None and SEED_ENV not in os.environ:
            seed = file_seed
        y = scenario_array(scenario, SensorModel.standard(scenario.n_sensors), seed)
        if args.output in (None, "-"):
            raise InputError("simulate stream needs --output")
        write_stream_csv(args.output, y)
        return 0

    n = s.get("n_sensors")
    if n is None:
        raise InputError("--n-sensors is required")
    n = int(n)
    kind = _kind(s)
    trials = int(s.get("trials", 500))
    cap = int(s.get("cap", 100_000))
    jobs = int(args.jobs or 1)
    raw_b = args.threshold if args.threshold is not None else (None if args.arl is not None else s.file.get("threshold"))
    thresholds = None if raw_b is None else _floats(raw_b)
    base = _detector_config(s, n, kind, None if thresholds is None else thresholds[0])
    if thresholds is None:
        thresholds = [base.b]
    cfgs = [DetectorConfig(b, base.p0, base.w, base.nominal_rates, base.adaptive) for b in thresholds]
    desc = {"metric": args.metric, "kind": kind, "n_sensors": n, "p0": base.p0, "w": base.w, "trials": trials,
            "cap": cap, "seed": seed, "nominal_rates": base.nominal_rates, "adaptive": base.adaptive}
    metrics, xs = {}, []

    if args.metric == "arl":
        if len(cfgs) > 1 and not args.verbose:
            stats = arl_curve(base, n, thresholds, trials, cap, seed, kind)
        else:
            stats = []
            for cfg in cfgs:
                st, reports = simulate_arl(cfg, n, trials, cap, seed, kind, jobs, return_reports=True)
                if args.verbose:
                    _trial_log(reports, f"arl@b={cfg.b!r}")
                stats.append(st)
        for b, st in zip(thresholds, stats):
            metrics[f"arl@b={b!r}"] = st
            xs.append(b)
    elif args.metric in ("edd", "cpe"):
        rates = s.get("rates")
        if rates is None:
            raise InputError(f"simulate {args.metric} needs --rates")
        rates = _floats(rates)
        n_aff = args.n_affected
        if n_aff is None:
            grid = [np.array(rates)]
            labels = [None]
        else:
            if not 1 <= n_aff <= n:
                raise InputError(f"--n-affected must lie in [1, {n}]")
            grid = [np.full(n_aff, c) for c in rates]
            labels = rates
        if any(g.size > n for g in grid):
            raise InputError("more rates than sensors")
        desc.update(rates=rates, n_affected=n_aff)
        if args.metric == "edd":
            for cfg in cfgs:
                for g, c in zip(grid, labels):
                    st, reports = simulate_edd(cfg, n, g, trials, seed, kind, cap, n_jobs=jobs, return_reports=True)
                    label = f"edd@b={cfg.b!r}" + ("" if c is None else f",c={c!r}")
                    if args.verbose:
                        _trial_log(reports, label)
                    metrics[label] = st
                    xs.append(cfg.b if c is None else c)
        else:
            kappa = int(s.get("kappa", 100))
            desc["kappa"] = kappa
            for cfg in cfgs:
                for g, c in zip(grid, labels):
                    r = simulate_cpe_mse({"d": (kind, cfg)}, n, g, kappa, trials, seed)["d"]
                    label = f"cpe_mse@b={cfg.b!r}" + ("" if c is None else f",c={c!r}")
                    # trials column counts scored trials; false alarms and censored runs are excluded
                    metrics[label] = SummaryStats(r.mse, r.standard_error, r.used, min(r.censored, r.used))
                    xs.append(cfg.b if c is None else c)
    else:  # pragma: no cover - argparse restricts choices
        raise InputError(f"unknown metric {args.metric}")

    fh, close = _out(args.output)
    fh.write(write_summary_csv(summary_rows(desc, metrics)))
    if close:
        fh.close()
    if args.series:
        vals = list(metrics.values())
        emit_series(xs, [v.mean for v in vals], [v.standard_error for v in vals], path=args.series,
                    fmt=args.series_format)
    return 0


# -- whiten / detrend ---------------------------------------------------------

def run_whiten(args) -> int:
    s = Settings(args)
    stream = read_stream_csv(args.stream)
    cov_path = s.get("cov")
    if cov_path is None:
        raise InputError("--cov is required")
    try:
        cov = load_covariance(cov_path)
    except (OSError, ValueError) as exc:
        raise InputError(f"{cov_path}: {exc}") from None
    if cov.shape[0] != stream.n_sensors:
        raise InputError(f"covariance is {cov.shape[0]}x{cov.shape[0]}, stream has {stream.n_sensors} sensors")
    mu = _model(s, stream.n_sensors).mu if s.get("model") else None
    try:
        tr = build_whitener(cov, mu)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = unwhiten(tr, stream.values) if args.inverse else whiten(tr, stream.values)
    if args.output in (None, "-"):
        raise InputError("--output is required")
    write_stream_csv(args.output, out, stream.t, stream.names)
    return 0


def run_detrend(args) -> int:
    s = Settings(args)
    stream = read_stream_csv(args.stream)
    h = s.get("fit_horizon")
    if h is None:
        raise InputError("--fit-horizon is required")
    try:
        trend = detrend_linear(stream.values, int(h))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if args.output in (None, "-"):
        raise InputError("--output is required")
    write_stream_csv(args.output, trend.residuals(stream.values, 1), stream.t, stream.names)
    rec = {"fit_horizon": trend.fit_horizon, "intercept": trend.intercept.tolist(), "slope": trend.slope.tolist(),
           "sigma": trend.sigma.tolist(), "slope_se": trend.slope_se.tolist()}
    sys.stdout.write(json.dumps(rec) + "\n")
    return 0


# -- prognose -----------------------------------------------------------------

def _system_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{directory} is not a directory")
    files = sorted(d.glob("*.csv"))
    if not files:
        raise InputError(f"{directory} has no .csv files")
    return files


def _read_truth(path):
    truth = {}
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None
    if not rows or [h.strip() for h in rows[0]] != ["system", "life"]:
        raise InputError(f"{path}: row 1: header must be system,life")
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != 2:
            raise InputError(f"{path}: row {i}: expected 2 fields")
        try:
            truth[r[0].strip()] = float(r[1])
        except ValueError:
            raise InputError(f"{path}: row {i}: life is not a number") from None
    return truth


def run_prognose(args) -> int:
    s = Settings(args)
    kind = _kind(s)
    eta = float(s.get("eta", 0.5))
    if not eta > 0:
        raise InputError("eta must be positive")
    train_files = _system_files(args.train)
    test_files = _system_files(args.test)
    truth = _read_truth(args.truth) if args.truth else {}

    first = read_stream_csv(train_files[0])
    n = first.n_sensors
    model = _model(s, n)
    config = _detector_config(s, n, kind)

    feats, unresolved_train = [], 0
    for f in train_files:
        st = first if f == train_files[0] else read_stream_csv(f)
        if st.n_sensors != n:
            raise InputError(f"{f}: {st.n_sensors} sensors, expected {n}")
        sf = extract_features(st.values, config, model, kind, failure_time=len(st), refine=args.refine)
        if sf is None:
            unresolved_train += 1
        else:
            feats.append(sf)
    if len(feats) < n + 2:
        raise InputError(f"only {len(feats)} training systems alarmed; need at least {n + 2}")
    try:
        fitted: PrognosticModel = fit_ttf_model(feats, eta)
    except np.linalg.LinAlgError as exc:
        raise InputError(str(exc)) from None

    fh, close = _out(args.output)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["system", "stop_time", "k_hat", "predicted_life", "actual_life", "relative_error"])
    errors, unresolved_test = [], 0
    for f in test_files:
        st = read_stream_csv(f)
        if st.n_sensors != n:
            raise InputError(f"{f}: {st.n_sensors} sensors, expected {n}")
        sf: SystemFeatures | None = extract_features(st.values, config, model, kind)
        actual = truth.get(f.stem)
        if sf is None:
            unresolved_test += 1
            w.writerow([f.stem, "", "", "", "" if actual is None else repr(actual), ""])
            continue
        pred = predict_life(sf, fitted)
        err = "" if actual is None else repr(float(relative_error(pred, actual)))
        if actual is not None:
            errors.append(float(err))
        w.writerow([f.stem, sf.stop_time, sf.k_hat, repr(float(pred)), "" if actual is None else repr(actual), err])
    if close:
        fh.close()
    summary = {"threshold": config.b, "eta": eta, "beta": fitted.beta.tolist(),
               "beta_se": fitted.beta_se.tolist(), "unresolved_train": unresolved_train,
               "unresolved_test": unresolved_test,
               "median_relative_error": float(np.median(errors)) if errors else None}
    sys.stderr.write(json.dumps(summary) + "\n")
    return 0


# -- parser -------------------------------------------------------------------

def _detector_flags(p, many=False):
    p.add_argument("--kind", choices=sorted(DETECTOR_KINDS))
    g = p.add_mutually_exclusive_group()
    if many:
        g.add_argument("--threshold", help="alarm threshold b, or a comma list")
    else:
        g.add_argument("--threshold", type=float, help="alarm threshold b")
    g.add_argument("--arl", type=float, help="target ARL; b from the analytic approximation (glr)")
    p.add_argument("--p0", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--nominal-rates", dest="nominal_rates", help="cusum/multichart slopes, one or N values")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--a", type=float, help="adaptive indicator cutoff")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with default option values")
    common.add_argument("--seed", type=int, help=f"master seed (default ${SEED_ENV} or 0)")
    common.add_argument("-o", "--output", help="output path (default stdout where allowed)")

    parser = _Parser(prog="slopecpd", description="Sparse slope change detection across sensor arrays.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", parents=[common], help="run a detector over a stream CSV")
    p.add_argument("stream")
    p.add_argument("--model", help="sensor model CSV with header mu,sigma")
    p.add_argument("--trace", action="store_true", help="emit the statistic at every step")
    _detector_flags(p)
    p.set_defaults(func=run_detect)

    p = sub.add_parser("calibrate", parents=[common], help="analytic threshold or ARL")
    p.add_argument("--n-sensors", dest="n_sensors", type=int)
    p.add_argument("--p0", type=float)
    p.add_argument("--window", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--arl", type=float)
    g.add_argument("--threshold", type=float)
    p.set_defaults(func=run_calibrate)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo ARL, EDD, change-point MSE, or a stream")
    p.add_argument("metric", choices=["arl", "edd", "cpe", "stream"])
    p.add_argument("--n-sensors", dest="n_sensors", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--cap", type=int)
    p.add_argument("--rates", help="post-change slopes (one per affected sensor, or a grid with --n-affected)")
    p.add_argument("--n-affected", dest="n_affected", type=int)
    p.add_argument("--kappa", type=int)
    p.add_argument("--scenario", help="scenario JSON (metric stream)")
    p.add_argument("--jobs", type=int)
    p.add_argument("--series", help="also write plot data x,y,stderr here")
    p.add_argument("--series-format", dest="series_format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("-v", "--verbose", action="store_true", help="per-trial JSON lines on stderr")
    _detector_flags(p, many=True)
    p.set_defaults(func=run_simulate)

    p = sub.add_parser("whiten", parents=[common], help="decorrelate a stream with a known covariance")
    p.add_argument("stream")
    p.add_argument("--cov")
    p.add_argument("--model", help="sensor model CSV; its mu is subtracted")
    p.add_argument("--inverse", action="store_true", help="undo the whitening")
    p.set_defaults(func=run_whiten)

    p = sub.add_parser("detrend", parents=[common], help="remove a per-sensor linear trend")
    p.add_argument("stream")
    p.add_argument("--fit-horizon", dest="fit_horizon", type=int)
    p.set_defaults(func=run_detrend)

    p = sub.add_parser("prognose", parents=[common], help="fit and apply the time-to-failure model")
    p.add_argument("--train", required=True, help="directory of run-to-failure stream CSVs")
    p.add_argument("--test", required=True, help="directory of partial stream CSVs")
    p.add_argument("--truth", help="CSV system,life with actual test lives")
    p.add_argument("--eta", type=float)
    p.add_argument("--model", help="sensor model CSV with header mu,sigma")
    p.add_argument("--refine", action="store_true", help="re-estimate training onsets from the full run")
    _detector_flags(p)
    p.set_defaults(func=run_prognose)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except InputError as exc:
        sys.stderr.write(f"slopecpd: error: {exc}\n")
        return EXIT_INPUT
    except ValueError as exc:
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"slopecpd: error: {msg}\n")
        return EXIT_INPUT
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())
