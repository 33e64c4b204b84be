import json
import subprocess
import sys

import numpy as np
import pytest

from slopecpd.cli import main
from slopecpd.io import (InputError, emit_series, read_model_csv, read_series, read_stream_csv,
                         write_model_csv, write_stream_csv)
from slopecpd.model import SensorModel


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def streams(tmp_path):
    rng = np.random.default_rng(1)
    write_stream_csv(tmp_path / "null.csv", rng.standard_normal((1000, 100)))
    y = rng.standard_normal((300, 100))
    t = np.arange(1, 301)
    y[:, :30] += np.maximum(t - 100, 0)[:, None] * 1.0
    write_stream_csv(tmp_path / "slope.csv", y)
    return tmp_path


def test_emit_series_csv():
    text = emit_series([1, 2, 3], [0.5, 0.25, 1 / 3], [0.1, None, float("nan")])
    lines = text.splitlines()
    assert len(lines) == 4 and lines[0] == "x,y,stderr"
    assert lines[2].endswith(",") and lines[3].endswith(",")
    x, y, se = read_series(text)
    assert x == [1.0, 2.0, 3.0] and y == [0.5, 0.25, 1 / 3] and se == [0.1, None, None]
    assert emit_series([1, 2, 3], [0.5, 0.25, 1 / 3], [0.1, None, None]) == text


def test_emit_series_jsonl(tmp_path):
    path = tmp_path / "s.jsonl"
    emit_series([0.1], [2.0 / 7], None, path=path, fmt="jsonl")
    assert read_series(path) == ([0.1], [2.0 / 7], [None])
    with pytest.raises(ValueError):
        emit_series([], [])
    with pytest.raises(OSError):
        emit_series([1], [1], path=tmp_path / "missing" / "x.csv")


def test_stream_csv_round_trip_and_errors(tmp_path):
    y = np.random.default_rng(0).normal(size=(5, 3))
    write_stream_csv(tmp_path / "a.csv", y, t=[2, 4, 6, 8, 10])
    s = read_stream_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(s.values, y)
    assert s.t.tolist() == [2, 4, 6, 8, 10] and s.names == ("s1", "s2", "s3")
    bad = {
        "t,s1\n1,0.1\n1,0.2\n": "row 3",
        "t,s1\n1,abc\n": "row 2",
        "x,s1\n1,1\n": "row 1",
        "t,s1\n1,nan\n": "non-finite",
        "t,s1\n": "no data",
        "": "empty",
    }
    for text, msg in bad.items():
        (tmp_path / "b.csv").write_text(text)
        with pytest.raises(InputError, match=msg):
            read_stream_csv(tmp_path / "b.csv")


def test_model_csv(tmp_path):
    m = SensorModel([1.0, 2.0], [0.5, 3.0])
    write_model_csv(tmp_path / "m.csv", m)
    back = read_model_csv(tmp_path / "m.csv")
    np.testing.assert_array_equal(back.mu, m.mu)
    (tmp_path / "bad.csv").write_text("mu,sigma\n0,-1\n")
    with pytest.raises(InputError, match="sigma"):
        read_model_csv(tmp_path / "bad.csv")


def test_detect_null_stream_no_alarm(streams, capsys):
    code, out, _ = run(["detect", str(streams / "null.csv"), "--arl", "5000"], capsys)
    assert code == 1
    rec = json.loads(out.splitlines()[-1])
    assert rec["event"] == "no_alarm" and rec["steps"] == 1000


def test_detect_slope_alarm(streams, capsys):
    code, out, _ = run(["detect", str(streams / "slope.csv"), "--threshold", "46.34", "--trace"], capsys)
    assert code == 0
    lines = [json.loads(x) for x in out.splitlines()]
    alarm = lines[-1]
    assert alarm["event"] == "alarm" and abs(alarm["k_hat"] - 100) <= 5
    assert len(alarm["c_hat"]) == 100
    assert [x["step"] for x in lines[:-1]] == list(range(1, alarm["stop_time"] + 1))


def test_detect_input_errors(tmp_path, streams, capsys):
    (tmp_path / "empty.csv").write_text("")
    code, out, err = run(["detect", str(tmp_path / "empty.csv")], capsys)
    assert code == 2 and err.count("\n") == 1 and err.startswith("slopecpd: error:")
    write_model_csv(tmp_path / "m.csv", SensorModel.standard(3))
    code, _, err = run(["detect", str(streams / "null.csv"), "--model", str(tmp_path / "m.csv")], capsys)
    assert code == 2 and "model file has 3 sensors" in err
    code, _, err = run(["detect", str(streams / "null.csv"), "--p0", "1.5"], capsys)
    assert code == 2 and err.count("\n") == 1
    code, _, err = run(["detect", str(streams / "null.csv"), "--kind", "cusum", "--threshold", "5"], capsys)
    assert code == 2 and "nominal" in err
    code, _, err = run(["detect", str(streams / "null.csv"), "--kind", "adaptive"], capsys)
    assert code == 2 and "--threshold is required" in err
    code, _, err = run(["detect"], capsys)
    assert code == 2 and err.count("\n") == 1


def test_config_file_and_seed(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_sensors": 8, "threshold": "9,11", "trials": 20, "cap": 3000, "p0": 0.5,
                               "window": 40}))
    argv = ["simulate", "arl", "--config", str(cfg)]
    monkeypatch.setenv("SLOPECPD_SEED", "5")
    code, a, _ = run(argv, capsys)
    code2, b, _ = run(argv, capsys)
    assert code == code2 == 0 and a == b
    monkeypatch.setenv("SLOPECPD_SEED", "6")
    _, c, _ = run(argv, capsys)
    assert c != a
    _, d, _ = run(argv + ["--seed", "5"], capsys)
    assert d == a
    rows = a.splitlines()
    assert rows[0] == "config,metric,mean,stderr,trials,censored" and len(rows) == 3
    cfg.write_text(json.dumps({"n_sensor": 8}))
    code, _, err = run(argv, capsys)
    assert code == 2 and "unknown config keys" in err


def test_calibrate_command(capsys):
    code, out, _ = run(["calibrate", "--n-sensors", "100", "--arl", "5000"], capsys)
    rec = json.loads(out)
    assert code == 0 and abs(rec["threshold"] - 46.34) < 0.5
    code, out, _ = run(["calibrate", "--n-sensors", "100", "--threshold", "46.34"], capsys)
    assert json.loads(out)["arl"] == pytest.approx(4990, rel=0.05)
    code, _, err = run(["calibrate", "--n-sensors", "100", "--threshold", "10"], capsys)
    assert code == 2 and "outside" in err


def test_simulate_series_and_verbose(tmp_path, capsys):
    series = tmp_path / "s.csv"
    code, out, err = run(["simulate", "edd", "--n-sensors", "10", "--threshold", "12", "--rates", "0.05,0.2",
                          "--n-affected", "3", "--trials", "10", "--series", str(series), "-v"], capsys)
    assert code == 0
    x, y, se = read_series(series)
    assert x == [0.05, 0.2] and y[1] < y[0] and all(s is not None for s in se)
    logs = [json.loads(line) for line in err.splitlines()]
    assert len(logs) == 20 and {"trial", "seed", "stop_time", "k_hat", "alarmed_before_cap"} <= set(logs[0])


def test_whiten_detrend_commands(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    np.savetxt(tmp_path / "cov.csv", a @ a.T + np.eye(3), delimiter=",")
    y = rng.normal(size=(40, 3)) + 0.1 * np.arange(40)[:, None]
    write_stream_csv(tmp_path / "y.csv", y)
    assert main(["whiten", str(tmp_path / "y.csv"), "--cov", str(tmp_path / "cov.csv"), "-o", str(tmp_path / "w.csv")]) == 0
    assert main(["whiten", str(tmp_path / "w.csv"), "--cov", str(tmp_path / "cov.csv"), "--inverse",
                 "-o", str(tmp_path / "b.csv")]) == 0
    np.testing.assert_allclose(read_stream_csv(tmp_path / "b.csv").values, y, atol=1e-10)
    capsys.readouterr()
    code, out, _ = run(["detrend", str(tmp_path / "y.csv"), "--fit-horizon", "40", "-o", str(tmp_path / "r.csv")], capsys)
    assert code == 0 and len(json.loads(out)["slope"]) == 3
    np.testing.assert_allclose(read_stream_csv(tmp_path / "r.csv").values.mean(axis=0), 0, atol=1e-10)
    np.savetxt(tmp_path / "bad.csv", np.array([[1.0, 2.0], [2.0, 1.0]]), delimiter=",")
    code, _, err = run(["whiten", str(tmp_path / "y.csv"), "--cov", str(tmp_path / "bad.csv"), "-o", "x"], capsys)
    assert code == 2


def test_prognose_command(tmp_path, capsys):
    from slopecpd.prognostics import synthetic_cohort
    beta = np.zeros(22)
    beta[0] = 7.0
    beta[1:8] = np.linspace(-9, -4, 7)
    for name, seed in (("train", 1), ("test", 2)):
        c = synthetic_cohort(30, beta, 0.2, seed=seed)
        (tmp_path / name).mkdir()
        lines = ["system,life"]
        for j, (y, life) in enumerate(zip(c.streams, c.failure)):
            write_stream_csv(tmp_path / name / f"u{j:02d}.csv", y)
            lines.append(f"u{j:02d},{life}")
        (tmp_path / f"{name}.csv").write_text("\n".join(lines) + "\n")
    code, out, err = run(["prognose", "--train", str(tmp_path / "train"), "--test", str(tmp_path / "test"),
                          "--truth", str(tmp_path / "test.csv"), "--eta", "0.2", "--arl", "5000"], capsys)
    assert code == 0
    rows = out.splitlines()
    assert rows[0] == "system,stop_time,k_hat,predicted_life,actual_life,relative_error" and len(rows) == 31
    summary = json.loads(err)
    assert len(summary["beta"]) == 22 and summary["median_relative_error"] < 0.3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "slopecpd", "calibrate", "--n-sensors", "200", "--arl", "10000"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and abs(json.loads(proc.stdout)["threshold"] - 78.66) < 0.5
