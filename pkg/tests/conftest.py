import numpy as np
import pytest

from panelmsm import StudyDesign, build_model, simulate_panel, spec_from_config


def two_state_exp_config():
    return {
        "states": 2,
        "absorbing": [2],
        "transitions": [{"from": 1, "to": 2, "baseline": "exponential"}],
    }


def three_state_config(baseline="gompertz", covariates=("sex",)):
    cov = list(covariates)
    return {
        "states": 3,
        "absorbing": [3],
        "transitions": [
            {"from": 1, "to": 2, "baseline": baseline, "covariates": cov},
            {"from": 2, "to": 1, "baseline": baseline},
            {"from": 1, "to": 3, "baseline": baseline, "covariates": cov},
            {"from": 2, "to": 3, "baseline": baseline, "covariates": cov},
        ],
    }


@pytest.fixture
def two_state_model():
    return build_model(spec_from_config(two_state_exp_config()))


@pytest.fixture
def three_state_model():
    return build_model(spec_from_config(three_state_config()))


@pytest.fixture
def small_panel(three_state_model):
    theta = start_near_truth(three_state_model)
    design = StudyDesign(n_subjects=60, followup=8.0, covariates=(("sex", 0.5),))
    data, _ = simulate_panel(three_state_model, theta, design, seed=42)
    return data


@pytest.fixture(scope="session")
def fit_panel():
    """A panel big enough that every transition is well represented."""
    model = build_model(spec_from_config(three_state_config()))
    truth = {
        "1->2.intercept": -1.5,
        "1->2.time": 0.02,
        "1->2.sex": 0.4,
        "2->1.intercept": -1.0,
        "2->1.time": -0.01,
        "1->3.intercept": -3.6,
        "1->3.time": 0.05,
        "1->3.sex": 0.3,
        "2->3.intercept": -2.9,
        "2->3.time": 0.05,
        "2->3.sex": 0.3,
    }
    theta = np.array([truth[n] for n in model.layout.theta_names])
    design = StudyDesign(n_subjects=350, followup=10.0, covariates=(("sex", 0.5),))
    data, _ = simulate_panel(model, theta, design, seed=2024)
    return model, theta, data


def start_near_truth(model):
    """A plausible parameter vector keyed off each parameter's role."""
    vals = {
        "intercept": -2.2,
        "time": 0.04,
        "logshape": 0.3,
        "alpha": -2.5,
        "covariate": 0.4,
    }
    theta = np.array([vals[r] for r in model.layout.theta_roles])
    # stagger entries a little so no two coefficients coincide
    theta = theta + 0.01 * np.arange(theta.size)
    return theta
