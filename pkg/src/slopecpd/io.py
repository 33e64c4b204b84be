"""Stream CSV files, sensor-model files, run configuration and plot-data series."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .model import SensorModel

__all__ = [
    "InputError",
    "StreamData",
    "read_stream_csv",
    "write_stream_csv",
    "read_model_csv",
    "write_model_csv",
    "CONFIG_KEYS",
    "read_config",
    "emit_series",
    "read_series",
]


class InputError(ValueError):
    """Malformed user input; the message is a single line."""


@dataclass(frozen=True)
class StreamData:
    t: np.ndarray
    values: np.ndarray
    names: tuple[str, ...]

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]


def _parse_float(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"row {row}: column {col}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise InputError(f"row {row}: column {col}: non-finite value {text!r}")
    return v


def read_stream_csv(path) -> StreamData:
    """Read a ``t,s1,...,sN`` file.  Row numbers in errors count the header as row 1.

    ``t`` must be strictly increasing; a gap or a repeat usually means a dropped
    or duplicated frame.
    """
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise InputError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[0] != "t" or len(header) < 2:
            raise InputError(f"row 1: header must be t,s1,...,sN, got {','.join(header)}")
        n = len(header) - 1
        times, rows = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != n + 1:
                raise InputError(f"row {row_no}: expected {n + 1} fields, got {len(row)}")
            t = _parse_float(row[0], row_no, "t")
            if times and not t > times[-1]:
                raise InputError(f"row {row_no}: t={row[0].strip()} is not greater than previous t")
            times.append(t)
            rows.append([_parse_float(x, row_no, header[j + 1]) for j, x in enumerate(row[1:])])
    if not rows:
        raise InputError(f"{path}: no data rows")
    return StreamData(np.array(times), np.array(rows, dtype=float), tuple(header[1:]))


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def write_stream_csv(path, values, t=None, names=None) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    t = np.arange(1, values.shape[0] + 1) if t is None else np.asarray(t)
    names = names or [f"s{j + 1}" for j in range(values.shape[1])]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *names])
        for ti, row in zip(t, values):
            w.writerow([_fmt(ti), *(repr(float(x)) for x in row)])


def read_model_csv(path) -> SensorModel:
    """Sensor model file: header ``mu,sigma``, one row per sensor."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None
    if not rows or [h.strip() for h in rows[0]] != ["mu", "sigma"]:
        raise InputError(f"{path}: row 1: header must be mu,sigma")
    body = [r for r in rows[1:] if r]
    if not body:
        raise InputError(f"{path}: no sensors")
    vals = []
    for i, r in enumerate(body, start=2):
        if len(r) != 2:
            raise InputError(f"{path}: row {i}: expected 2 fields")
        vals.append((_parse_float(r[0], i, "mu"), _parse_float(r[1], i, "sigma")))
    arr = np.array(vals)
    try:
        return SensorModel(arr[:, 0], arr[:, 1])
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def write_model_csv(path, model: SensorModel) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mu", "sigma"])
        for m, s in zip(model.mu, model.sigma):
            w.writerow([repr(float(m)), repr(float(s))])


# Run configuration: a flat JSON object.  Command-line flags override it.
CONFIG_KEYS = {
    "kind": "detector: glr, meanshift, adaptive, cusum or multichart",
    "threshold": "alarm threshold b",
    "arl": "target average run length (threshold from the analytic approximation)",
    "p0": "assumed fraction of affected sensors",
    "window": "window length w",
    "n_sensors": "number of sensors (calibrate, simulate)",
    "nominal_rates": "slope per sensor (or one for all) in noise units per step, cusum and multichart",
    "alpha": "adaptive Beta prior alpha",
    "beta": "adaptive Beta prior beta",
    "a": "adaptive indicator cutoff",
    "model": "sensor model CSV (mu,sigma)",
    "cov": "covariance CSV, N x N without header",
    "seed": "master seed",
    "trials": "Monte Carlo trials",
    "cap": "run-length cap",
    "rates": "post-change slopes, one per affected sensor",
    "kappa": "change time for change-point error runs",
    "eta": "lognormal scale of the time-to-failure model",
    "fit_horizon": "rows used to fit the linear trend",
}


def read_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise InputError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise InputError(f"{path}: unknown config keys {unknown}")
    return raw


def emit_series(x, y, stderr=None, path=None, fmt: str = "csv") -> str:
    """Write plot data as CSV ``x,y,stderr`` or JSON lines; returns the text.

    A missing standard error (``None`` or NaN) is an empty CSV cell or JSON
    ``null``, never zero.  Floats use ``repr`` so a read-back is exact.
    """
    x, y = list(x), list(y)
    if not x:
        raise ValueError("series is empty")
    if len(x) != len(y):
        raise ValueError("x and y differ in length")
    se = [None] * len(x) if stderr is None else list(stderr)
    if len(se) != len(x):
        raise ValueError("stderr length differs from x")
    se = [None if s is None or (isinstance(s, float) and math.isnan(s)) else float(s) for s in se]
    buf = io.StringIO()
    if fmt == "csv":
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "stderr"])
        for a, b, s in zip(x, y, se):
            w.writerow([repr(float(a)), repr(float(b)), "" if s is None else repr(s)])
    elif fmt == "jsonl":
        for a, b, s in zip(x, y, se):
            buf.write(json.dumps({"x": float(a), "y": float(b), "stderr": s}) + "\n")
    else:
        raise ValueError(f"unknown series format {fmt!r}")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_series(source, fmt: str | None = None):
    """Inverse of :func:`emit_series`; ``source`` is a path or the text itself."""
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        if fmt is None:
            fmt = "jsonl" if str(source).endswith((".jsonl", ".json")) else "csv"
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = str(source)
        if fmt is None:
            fmt = "jsonl" if text.lstrip().startswith("{") else "csv"
    xs, ys, ses = [], [], []
    if fmt == "csv":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["x", "y", "stderr"]:
            raise InputError("series header must be x,y,stderr")
        for r in rows[1:]:
            xs.append(float(r[0]))
            ys.append(float(r[1]))
            ses.append(float(r[2]) if r[2] != "" else None)
    else:
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                xs.append(rec["x"])
                ys.append(rec["y"])
                ses.append(rec["stderr"])
    return xs, ys, ses
