import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slopecpd.detectors import (AdaptiveParams, AdaptiveState, DetectorConfig, MixtureGLR, cusum_matrix,
                                estimate_changepoint, glr_profile, make_detector, posterior_mean,
                                step_adaptive, step_meanshift_mixture, step_mixture_cusum, step_mixture_glr,
                                step_multichart_cusum)
from slopecpd.local_stats import WindowState, soft_threshold_g
from slopecpd.model import NoiseSource, SensorModel
from slopecpd.montecarlo import TrialRunner

KINDS = ["glr", "meanshift", "adaptive", "cusum", "multichart"]


def _config(kind, b, n, p0=0.3, w=50):
    rates = np.full(n, 0.1) if kind in ("cusum", "multichart") else None
    adaptive = AdaptiveParams() if kind == "adaptive" else None
    return DetectorConfig(b=b, p0=p0, w=w, nominal_rates=rates, adaptive=adaptive)


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(b=1.0, p0=0.0)
    with pytest.raises(ValueError):
        DetectorConfig(b=np.inf)
    with pytest.raises(ValueError):
        DetectorConfig(b=1.0, w=0)
    with pytest.raises(ValueError):
        AdaptiveParams(alpha=0.0)
    with pytest.raises(ValueError, match="nominal_rates"):
        make_detector("cusum", DetectorConfig(b=1.0), n_sensors=2)
    with pytest.raises(ValueError, match="unknown"):
        make_detector("shewhart", DetectorConfig(b=1.0), n_sensors=2)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_residuals_never_alarm(kind):
    det = make_detector(kind, _config(kind, 1e-9, 4), n_sensors=4)
    for _ in range(80):
        status = det.update(np.zeros(4))
        assert not status.alarmed
        if kind in ("cusum", "multichart"):
            # a nonzero nominal slope is penalized on flat data
            assert status.statistic < 0
        else:
            assert status.statistic == 0.0


@pytest.mark.parametrize("kind", ["glr", "meanshift", "adaptive", "cusum"])
def test_zero_threshold_alarms_immediately(kind):
    det = make_detector(kind, _config(kind, 0.0, 3), n_sensors=3)
    res = det.run(np.random.default_rng(0).standard_normal((5, 3)))
    assert res.stop_time == 1 and res.k_hat == 0


def test_first_step_has_single_candidate():
    st_ = WindowState(2, 10)
    status = step_mixture_glr(DetectorConfig(b=100.0), st_, np.array([1.0, -2.0]))
    assert st_.candidates().tolist() == [0]
    assert status.statistic == pytest.approx(soft_threshold_g(np.array([1.0, -2.0]), 0.3).sum())


def test_cusum_zero_rate_and_glr_identity():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((40, 3)) + 0.05 * np.arange(1, 41)[:, None]
    st_ = WindowState(3, 60)
    zero = DetectorConfig(b=10.0, p0=0.5, nominal_rates=np.zeros(3))
    for row in z:
        assert step_mixture_cusum(zero, st_, row).statistic == 0.0
    # with delta = c_hat of candidate k the CUSUM term is U^2/2
    for k in (0, 11, 30):
        c_hat = st_.slope_mle(k)
        ell = cusum_matrix(c_hat, st_)[k]
        u = st_.u_stat(k)
        np.testing.assert_allclose(ell, u * u / 2, rtol=1e-10)
    # p0 = 1 with delta = c_hat at the maximizing k matches the GLR statistic
    cfg1 = DetectorConfig(b=10.0, p0=1.0)
    prof = glr_profile(cfg1, st_)
    k_star = int(np.argmax(prof))
    ell = cusum_matrix(st_.slope_mle(k_star), st_)[k_star]
    assert ell.sum() == pytest.approx(prof.max(), rel=1e-10)


def test_p0_one_reduces_to_chi_square():
    rng = np.random.default_rng(5)
    st_ = WindowState(6, 30)
    cfg = DetectorConfig(b=1e6, p0=1.0, w=30)
    for row in rng.standard_normal((45, 6)):
        status = step_mixture_glr(cfg, st_, row)
        u = st_.u_matrix()
        assert status.statistic == pytest.approx((u * u / 2).sum(axis=1).max(), rel=1e-10)


def test_posterior_mean_and_adaptive_weights():
    params = AdaptiveParams(1.0, 1.0, 2.0)
    np.testing.assert_allclose(posterior_mean([0, 1], params), [1 / 3, 2 / 3])
    st_ = WindowState(3, 20)
    ad = AdaptiveState.initial(3, params)
    cfg = DetectorConfig(b=1e9, adaptive=params, w=20)
    z = np.array([3.0, -3.0, 0.5])
    status = step_adaptive(cfg, st_, ad, z)
    # signed cutoff: only the first sensor has U > a
    np.testing.assert_array_equal(ad.s, [1, 0, 0])
    np.testing.assert_allclose(ad.rho, [2 / 3, 1 / 3, 1 / 3])
    u = z  # single candidate, A_1 = 1
    expected = np.log(1 - ad.rho + ad.rho * np.exp(u * u / 2)).sum()
    assert status.statistic == pytest.approx(expected, rel=1e-14)
    # U exactly at the cutoff is not counted
    st2, ad2 = WindowState(1, 5), AdaptiveState.initial(1, params)
    step_adaptive(cfg, st2, ad2, np.array([2.0]))
    assert ad2.s[0] == 0


def test_meanshift_constant_residuals():
    st_ = WindowState(1, 10, track_sums=True)
    for _ in range(4):
        step_meanshift_mixture(DetectorConfig(b=1e9), st_, np.ones(1))
    assert st_.u_meanshift_matrix()[0, 0] == pytest.approx(2.0)
    with pytest.raises(ValueError, match="track_sums"):
        step_meanshift_mixture(DetectorConfig(b=1.0), WindowState(1, 5), np.ones(1))


def test_multichart_single_sensor_drives_alarm():
    rng = np.random.default_rng(7)
    n, kappa = 5, 20
    z = rng.standard_normal((200, n)) * 1e-3
    z[:, 2] += 5.0 * np.maximum(np.arange(1, 201) - kappa, 0)
    rates = np.full(n, 1.0)
    cfg = DetectorConfig(b=50.0, nominal_rates=rates, w=50)
    det = make_detector("multichart", cfg, n_sensors=n)
    res = det.run(z)
    alone = make_detector("multichart", DetectorConfig(b=50.0, nominal_rates=rates[:1], w=50), n_sensors=1)
    res1 = alone.run(z[:, 2:3])
    assert res.stop_time == res1.stop_time and res.k_hat == res1.k_hat
    # per-sensor thresholds: excess is reported and alarms at zero
    st_ = WindowState(2, 10)
    status = step_multichart_cusum([1.0, 100.0], np.ones(2), st_, np.array([3.0, 3.0]))
    assert status.alarmed and status.statistic == pytest.approx(2.5 - 1.0)


def test_noiseless_onset_recovered():
    n, kappa = 8, 37
    t = np.arange(1, 120)
    y = np.zeros((t.size, n))
    y[:, :3] = 0.4 * np.maximum(t - kappa, 0)[:, None]
    y += 1e-9 * np.random.default_rng(1).standard_normal(y.shape)
    for kind in ("glr", "adaptive", "meanshift"):
        res = make_detector(kind, _config(kind, 30.0, n, w=100), n_sensors=n).run(y)
        if kind == "meanshift":
            assert abs(res.k_hat - kappa) <= 3
        else:
            assert res.k_hat == kappa
            np.testing.assert_allclose(res.c_hat[:3], 0.4, rtol=1e-6)
            assert res.stop_time - res.k_hat <= 100


def test_tie_rule_earliest_candidate():
    st_ = WindowState(1, 10)
    for _ in range(3):
        st_.advance(np.zeros(1))
    cfg = DetectorConfig(b=1.0)
    res = estimate_changepoint(cfg, st_, profile=np.array([1.0, 5.0, 5.0]))
    assert res.k_hat == 1
    with pytest.raises(RuntimeError):
        estimate_changepoint(cfg, st_, profile=np.zeros(3))
    with pytest.raises(RuntimeError):
        MixtureGLR(cfg, n_sensors=1).changepoint()


@pytest.mark.parametrize("kind", KINDS)
def test_alarm_coherence(kind):
    rng = np.random.default_rng(9)
    det = make_detector(kind, _config(kind, 8.0, 4), n_sensors=4)
    for row in rng.standard_normal((150, 4)) + 0.02 * np.arange(150)[:, None]:
        s = det.update(row)
        assert s.alarmed == (s.statistic >= 8.0)
        if kind not in ("cusum", "multichart"):
            assert s.statistic >= 0


def test_window_limit_consistency():
    rng = np.random.default_rng(10)
    z = rng.standard_normal((30, 3))
    cfg = DetectorConfig(b=1e9, p0=0.3, w=40)
    st_ = WindowState(3, 40)
    for t in range(1, 31):
        stat = step_mixture_glr(cfg, st_, z[t - 1]).statistic
        best = -np.inf
        for k in range(t):
            i = np.arange(k + 1, t + 1)
            w_k = ((i - k)[:, None] * z[k:t]).sum(axis=0)
            u = w_k / np.sqrt(((i - k) ** 2).sum())
            best = max(best, soft_threshold_g(u, 0.3).sum())
        assert stat == pytest.approx(best, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(1e-3, 1.0))
def test_statistic_monotone_in_u(u1, extra, p0):
    other = np.array([0.7, -1.2])
    lo = soft_threshold_g(np.r_[u1, other], p0).sum()
    hi = soft_threshold_g(np.r_[u1 + extra, other], p0).sum()
    assert hi >= lo


def _run_kind(kind, y, model, b=25.0):
    det = make_detector(kind, _config(kind, b, model.n_sensors, w=60), model=model)
    trace = []
    res = det.run(y, trace=trace)
    return res, [s.statistic for s in trace]


@pytest.mark.parametrize("kind", KINDS)
def test_standardization_invariance_power_of_two(kind):
    rng = np.random.default_rng(12)
    n = 6
    z = rng.standard_normal((300, n)) + 0.03 * np.maximum(np.arange(1, 301) - 50, 0)[:, None] * (np.arange(n) < 3)
    mu = rng.normal(size=n) * 5
    sigma = rng.uniform(0.2, 4.0, n)
    y = mu + sigma * z
    scale = 2.0 ** np.array([3, -2, 0, 5, -7, 1])
    r0, tr0 = _run_kind(kind, y, SensorModel(mu, sigma))
    r1, tr1 = _run_kind(kind, y * scale, SensorModel(mu * scale, sigma * scale))
    assert r0.stop_time == r1.stop_time and r0.k_hat == r1.k_hat
    assert tr0 == tr1  # bit-identical


@pytest.mark.parametrize("kind", KINDS)
def test_standardization_invariance_general_scale(kind):
    rng = np.random.default_rng(13)
    n = 6
    z = rng.standard_normal((300, n)) + 0.03 * np.maximum(np.arange(1, 301) - 50, 0)[:, None] * (np.arange(n) < 3)
    mu = rng.normal(size=n) * 5
    sigma = rng.uniform(0.2, 4.0, n)
    y = mu + sigma * z
    scale = rng.uniform(0.1, 10.0, n)
    r0, tr0 = _run_kind(kind, y, SensorModel(mu, sigma))
    r1, tr1 = _run_kind(kind, y * scale, SensorModel(mu * scale, sigma * scale))
    assert r0.stop_time == r1.stop_time and r0.k_hat == r1.k_hat
    np.testing.assert_allclose(tr1, tr0, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("trial", [0, 1, 2])
def test_compiled_runner_matches_reference(kind, trial):
    n, seed, b, cap = 12, 77, 18.0, 3000
    cfg = _config(kind, b, n, w=80)
    rates = np.zeros(n)
    rates[:4] = 0.04
    runner = TrialRunner(kind, cfg, n, seed, trial, rates=rates, kappa=100, block=37)
    runner.advance(b, cap)
    z = NoiseSource(seed, n, trial).draw(cap) + np.maximum(np.arange(1, cap + 1) - 100, 0)[:, None] * rates
    det = make_detector(kind, cfg, n_sensors=n)
    res = det.run(z)
    assert res is not None and runner.alarm_time == res.stop_time
    assert runner.k_hat == res.k_hat


def test_compiled_runner_unequal_multichart_thresholds():
    n, seed, cap = 6, 5, 5000
    h = np.array([6.0, 7.0, 8.0, 9.0, 10.0, 11.0])
    cfg = DetectorConfig(b=0.0, nominal_rates=np.full(n, 0.05), w=80)
    runner = TrialRunner("multichart", cfg, n, seed, 0, thresholds=h)
    runner.advance(0.0, cap)
    z = NoiseSource(seed, n, 0).draw(cap)
    det = make_detector("multichart", cfg, n_sensors=n)
    det.thresholds = h
    res = det.run(z)
    assert runner.alarm_time == res.stop_time and runner.k_hat == res.k_hat


def test_kernel_near_threshold_uses_exact_value():
    # thresholds placed on observed statistic values must alarm exactly there
    n, seed = 10, 3
    cfg = _config("glr", 1e9, n, w=50)
    z = NoiseSource(seed, n, 0).draw(400)
    det = make_detector("glr", cfg, n_sensors=n)
    stats = [det.update(row).statistic for row in z]
    running = np.maximum.accumulate(stats)
    for target_t in (37, 150, 399):
        b = stats[target_t - 1]
        if b < running[target_t - 1]:
            continue
        r = TrialRunner("glr", DetectorConfig(b=b, p0=0.3, w=50), n, seed, 0)
        r.advance(b, 400)
        assert r.alarm_time == int(np.argmax(np.asarray(stats) >= b)) + 1
