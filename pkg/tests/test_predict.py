import numpy as np
import pytest

from panelmsm import (
    DataValidationError,
    ModelConfigError,
    NumericalError,
    StudyDesign,
    build_model,
    fit,
    kaplan_meier,
    predict_curve,
    predict_matrix,
    simulate_panel,
    spec_from_config,
    survival_curves,
)
from panelmsm.predict import covariate_vector, sampling_root
from conftest import three_state_config


@pytest.fixture(scope="module")
def fitted():
    model = build_model(spec_from_config(three_state_config()))
    truth = {
        "1->2.intercept": -1.5, "1->2.time": 0.02, "1->2.sex": 0.4,
        "2->1.intercept": -1.0, "2->1.time": -0.01,
        "1->3.intercept": -3.6, "1->3.time": 0.05, "1->3.sex": 0.3,
        "2->3.intercept": -2.9, "2->3.time": 0.05, "2->3.sex": 0.3,
    }
    theta = np.array([truth[n] for n in model.layout.theta_names])
    design = StudyDesign(n_subjects=250, followup=10.0, covariates=(("sex", 0.5),))
    data, _ = simulate_panel(model, theta, design, seed=77)
    res = fit(model, data)
    return model, res, data


def test_covariate_vector_sequence(three_state_model):
    x = covariate_vector(three_state_model, [1.0])
    assert np.array_equal(x, [1.0])


def test_covariate_vector_rejects_extra_name(three_state_model):
    with pytest.raises(ModelConfigError):
        covariate_vector(three_state_model, {"sex": 1.0, "bmi": 2.0})


def test_sampling_root_reproduces_covariance():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(4, 4))
    C = A @ A.T
    L = sampling_root(C)
    assert np.allclose(L @ L.T, C)


def test_sampling_root_zero_matrix():
    L = sampling_root(np.zeros((3, 3)))
    assert not L.any()


def test_sampling_root_indefinite_needs_clip():
    C = np.diag([1.0, -1e-8])
    with pytest.raises(NumericalError):
        sampling_root(C)
    L = sampling_root(C, clip_covariance=True)
    got = L @ L.T
    assert got[0, 0] == pytest.approx(1.0)
    assert got[1, 1] == pytest.approx(0.0, abs=1e-15)


def test_predict_curve_shapes_and_bands(fitted):
    model, res, _ = fitted
    curve = predict_curve(
        model, res.theta, res.covariance, t1=5.0, t2=9.0,
        x={"sex": 1.0}, h=0.5, n_draws=150, seed=3,
    )
    T = curve.times.shape[0]
    assert curve.times[0] == 5.0 and curve.times[-1] == 9.0
    assert curve.point.shape == (T, 3, 3)
    # every slice is a stochastic matrix
    assert np.allclose(curve.point.sum(axis=2), 1.0, atol=1e-10)
    assert (curve.point >= 0).all()
    assert np.allclose(curve.mc_mean.sum(axis=2), 1.0, atol=1e-10)
    assert (curve.lower >= 0).all() and (curve.upper <= 1).all()
    assert (curve.lower <= curve.upper + 1e-12).all()
    # the point estimate starts at the identity
    assert np.allclose(curve.point[0], np.eye(3))


def test_predict_fractional_horizon_hits_endpoint(fitted):
    model, res, _ = fitted
    curve = predict_curve(
        model, res.theta, res.covariance, t1=5.0, t2=6.3,
        x={"sex": 0.0}, h=0.5, n_draws=40, seed=1,
    )
    assert curve.times[-1] == pytest.approx(6.3)
    steps = np.diff(curve.times)
    assert np.allclose(steps[:-1], 0.5)
    assert steps[-1] == pytest.approx(0.3)


def test_predict_deterministic_under_seed(fitted):
    model, res, _ = fitted
    kw = dict(t1=4.0, t2=7.0, x={"sex": 1.0}, h=0.5, n_draws=100, seed=11)
    a = predict_curve(model, res.theta, res.covariance, **kw)
    b = predict_curve(model, res.theta, res.covariance, **kw)
    assert np.array_equal(a.mc_mean, b.mc_mean)
    assert np.array_equal(a.lower, b.lower)
    c = predict_curve(model, res.theta, res.covariance, **{**kw, "seed": 12})
    assert not np.array_equal(a.mc_mean, c.mc_mean)


def test_predict_mean_close_to_point(fitted):
    model, res, _ = fitted
    curve = predict_curve(
        model, res.theta, res.covariance, t1=5.0, t2=9.0,
        x={"sex": 1.0}, h=0.5, n_draws=400, seed=5,
    )
    se = curve.mc_se / np.sqrt(400)
    gap = np.abs(curve.mc_mean - curve.point)
    # the MC average sits near the plug-in estimate (within sampling noise
    # plus a curvature term that shows up where bands are wide)
    assert (gap <= 4 * se + 0.02).all()


def test_predict_matrix_identity_when_no_time_passes(fitted):
    model, res, _ = fitted
    pm = predict_matrix(
        model, res.theta, res.covariance, t1=5.0, t2=5.0,
        x={"sex": 1.0}, n_draws=50, seed=2,
    )
    assert np.array_equal(pm.point, np.eye(3))
    assert np.array_equal(pm.mc_mean, np.eye(3))
    assert not pm.mc_se.any()


def test_predict_matrix_equals_curve_endpoint(fitted):
    model, res, _ = fitted
    pm = predict_matrix(
        model, res.theta, res.covariance, t1=5.0, t2=8.0,
        x={"sex": 1.0}, h=0.5, n_draws=80, seed=9,
    )
    curve = predict_curve(
        model, res.theta, res.covariance, t1=5.0, t2=8.0,
        x={"sex": 1.0}, h=0.5, n_draws=80, seed=9,
    )
    assert np.allclose(pm.point, curve.point[-1])
    assert np.allclose(pm.mc_mean, curve.mc_mean[-1])
    assert np.allclose(pm.lower, curve.lower[-1])


# --- Kaplan-Meier ----------------------------------------------------------

def test_km_hand_example():
    km = kaplan_meier(
        np.array([1.0, 2.0, 3.0, 4.0, 5.0]),
        np.array([1, 1, 0, 1, 0]),
    )
    assert np.allclose(km.event_times, [1.0, 2.0, 4.0])
    assert np.allclose(km.survival, [4 / 5, 3 / 5, 3 / 10])
    # Greenwood at the last death
    s = 3 / 10
    var = s**2 * (1 / (5 * 4) + 1 / (4 * 3) + 1 / (2 * 1))
    assert km.variance[-1] == pytest.approx(var)
    assert (km.lower <= km.survival).all()
    assert (km.upper >= km.survival).all()
    assert (km.lower >= 0).all() and (km.upper <= 1).all()


def test_km_censored_tie_stays_at_risk():
    km = kaplan_meier(np.array([2.0, 2.0]), np.array([1, 0]))
    assert np.allclose(km.survival, [0.5])
    assert km.n_at_risk[0] == 2


def test_km_no_events():
    km = kaplan_meier(np.array([1.0, 2.0]), np.array([0, 0]))
    assert km.event_times.size == 0
    s, lo, hi = km.evaluate(np.array([0.0, 1.5, 9.0]))
    assert np.allclose(s, 1.0)
    assert np.allclose(lo, 1.0) and np.allclose(hi, 1.0)


def test_km_evaluate_steps():
    km = kaplan_meier(
        np.array([1.0, 2.0, 3.0, 4.0, 5.0]),
        np.array([1, 1, 0, 1, 0]),
    )
    s, _, _ = km.evaluate(np.array([0.5, 1.0, 1.7, 4.4]))
    assert np.allclose(s, [1.0, 4 / 5, 4 / 5, 3 / 10])


def test_km_all_die_survival_reaches_zero():
    km = kaplan_meier(np.array([1.0, 2.0]), np.array([1, 1]))
    assert km.survival[-1] == 0.0
    assert km.lower[-1] == 0.0 and km.upper[-1] == 0.0


# --- model vs observed survival -------------------------------------------

def test_survival_curves_basic(fitted):
    model, res, data = fitted
    sc = survival_curves(model, res.theta, data, baseline_state=1, horizon=8.0, h=0.5)
    n1 = sc.curves.shape[0]
    assert n1 > 0
    assert sc.times[0] == 0.0
    assert np.allclose(sc.curves[:, 0], 1.0)
    # survival cannot increase
    assert (np.diff(sc.curves, axis=1) <= 1e-12).all()
    assert np.allclose(sc.mean, sc.curves.mean(axis=0))
    assert sc.durations.shape == (n1,)
    assert sc.events.shape == (n1,)
    # model and empirical curves tell the same broad story
    mid = sc.times.size // 2
    km_s, _, _ = sc.km.evaluate(sc.times)
    assert abs(sc.mean[mid] - km_s[mid]) < 0.15


def test_survival_curves_rejects_absorbing_baseline(fitted):
    model, res, data = fitted
    with pytest.raises(ModelConfigError):
        survival_curves(model, res.theta, data, baseline_state=3, horizon=5.0)


def test_survival_curves_rejects_unobserved_baseline(fitted):
    model, res, data = fitted
    # nobody enters the study in state 2 under the default design
    first = data.states[data.first_rows]
    assert not np.any(first == 2)
    with pytest.raises(DataValidationError):
        survival_curves(model, res.theta, data, baseline_state=2, horizon=5.0)
