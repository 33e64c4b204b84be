import json

import numpy as np
import pytest

from slopecpd.model import (NoiseSource, ObservationFrame, ScenarioSpec, SensorModel, generate_scenario,
                            load_covariance, load_scenario, scenario_array, standardize)


def test_standardize_examples():
    assert standardize([5.0], SensorModel([5.0], [2.0])) == pytest.approx([0.0])
    assert standardize([7.0], SensorModel([5.0], [2.0])) == pytest.approx([1.0])
    z = standardize(ObservationFrame(1, [3.0, 9.0]), SensorModel([5.0, 3.0], [2.0, 3.0]))
    np.testing.assert_allclose(z, [-1.0, 2.0])


def test_standardize_errors():
    with pytest.raises(ValueError):
        standardize([1.0, 2.0], SensorModel.standard(3))
    with pytest.raises(ValueError):
        SensorModel([0.0], [0.0])
    with pytest.raises(ValueError):
        SensorModel([0.0], [-1.0])


def test_standardize_inverts_scaling():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((20, 4))
    model = SensorModel(rng.normal(size=4), rng.uniform(0.5, 3, size=4))
    np.testing.assert_allclose(standardize(model.sigma * z + model.mu, model), z, rtol=1e-13, atol=1e-13)


def test_frame_rejects_nonfinite():
    with pytest.raises(ValueError):
        ObservationFrame(1, [0.0, np.nan])


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(3, kappa=5)  # change without affected sensors
    with pytest.raises(ValueError):
        ScenarioSpec(3, kappa=0, affected=(3,), rates=(1.0,))
    with pytest.raises(ValueError):
        ScenarioSpec(3, kappa=0, affected=(0,), rates=())
    scenario = ScenarioSpec(4, kappa=0, affected=(1, 3), rates=(0.5, 0.2))
    assert scenario.fraction == 0.5
    np.testing.assert_array_equal(scenario.rate_vector(), [0, 0.5, 0, 0.2])


def test_null_means():
    scenario = ScenarioSpec(3, horizon=100_000)
    model = SensorModel([1.0, -2.0, 0.5], [1.0, 1.0, 1.0])
    y = scenario_array(scenario, model, seed=11)
    assert np.all(np.abs(y.mean(axis=0) - model.mu) < 4 / np.sqrt(1e5))


def test_slope_mean():
    scenario = ScenarioSpec(1, kappa=0, affected=(0,), rates=(0.5,), horizon=10_000)
    y = scenario_array(scenario, SensorModel.standard(1), seed=5)
    resid = y[:, 0] - 0.5 * np.arange(1, 10_001)
    assert abs(resid.mean()) < 4 / np.sqrt(1e4)


def test_change_applies_after_kappa():
    scenario = ScenarioSpec(2, kappa=3, affected=(1,), rates=(1.0,), horizon=6)
    a = scenario_array(scenario, SensorModel.standard(2), seed=1)
    b = scenario_array(ScenarioSpec(2, horizon=6), SensorModel.standard(2), seed=1)
    np.testing.assert_array_equal(a[:, 0], b[:, 0])
    np.testing.assert_allclose(a[:, 1] - b[:, 1], [0, 0, 0, 1, 2, 3])


def test_determinism():
    scenario = ScenarioSpec(5, kappa=10, affected=(0, 2), rates=(0.1, 0.3), horizon=50)
    f1 = generate_scenario(scenario, SensorModel.standard(5), seed=42)
    f2 = generate_scenario(scenario, SensorModel.standard(5), seed=42)
    assert b"".join(f.values.tobytes() for f in f1) == b"".join(f.values.tobytes() for f in f2)
    assert [f.t for f in f1] == list(range(1, 51))


def test_noise_independent_of_block_size():
    a = NoiseSource(9, 4, trial=2).draw(100)
    src = NoiseSource(9, 4, trial=2)
    b = np.vstack([src.draw(7), src.draw(60), src.draw(33)])
    np.testing.assert_array_equal(a, b)


def test_covariance_convergence():
    cov = np.array([[1.0, 0.5, 0.2], [0.5, 2.0, -0.3], [0.2, -0.3, 1.5]])
    scenario = ScenarioSpec(3, cov=cov, horizon=100_000)
    y = scenario_array(scenario, SensorModel.standard(3), seed=2)
    assert np.linalg.norm(np.cov(y.T) - cov) < 5 * 3 / np.sqrt(1e5)


def test_non_pd_covariance_rejected():
    scenario = ScenarioSpec(2, cov=np.array([[1.0, 2.0], [2.0, 1.0]]), horizon=5)
    with pytest.raises(ValueError, match="positive definite"):
        scenario_array(scenario, SensorModel.standard(2), seed=0)


def test_load_scenario(tmp_path):
    np.savetxt(tmp_path / "cov.csv", np.eye(3) * 2, delimiter=",")
    (tmp_path / "s.json").write_text(json.dumps(
        {"n_sensors": 3, "kappa": 4, "affected": [1, 3], "rates": [0.1, 0.2], "cov_path": "cov.csv",
         "horizon": 20, "seed": 9}))
    scenario, seed = load_scenario(tmp_path / "s.json")
    assert seed == 9 and scenario.affected == (0, 2) and scenario.horizon == 20
    np.testing.assert_array_equal(scenario.cov, np.eye(3) * 2)
    np.testing.assert_array_equal(load_covariance(tmp_path / "cov.csv"), np.eye(3) * 2)
    (tmp_path / "bad.json").write_text(json.dumps({"n_sensors": 3, "colour": 1}))
    with pytest.raises(ValueError, match="unknown"):
        load_scenario(tmp_path / "bad.json")
