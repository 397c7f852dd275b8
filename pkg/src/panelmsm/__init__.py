"""Continuous-time multi-state survival models for interval-censored panel data.

Fits Markov multi-state models to panel observations where living states are
seen only at irregular visit times while death is recorded exactly.  Baseline
hazards per transition are exponential, Gompertz, Weibull, or penalised
B-splines; estimation is by Fisher scoring on the penalised log-likelihood,
with AIC-driven smoothing selection and Monte Carlo uncertainty bands for
predicted transition probabilities.
"""

__version__ = "0.1.0"

from .errors import (
    DataValidationError,
    ExtrapolationWarning,
    HazardDomainError,
    ModelConfigError,
    NumericalError,
)
from .hazards import Model, SplineBasis, TransitionHazard, build_model
from .likelihood import (
    PanelDataset,
    dataset_from_frame,
    dataset_loglik,
    dataset_report,
    load_panel,
    save_panel,
    subject_terms,
    validate_panel,
)
from .markov import (
    GridPolicy,
    build_generator,
    build_generators,
    chain_matrices,
    grid_cells,
    interval_matrices,
    transition_matrices,
)
from .modelspec import (
    Constraint,
    Exponential,
    Gompertz,
    ModelSpec,
    ParameterLayout,
    PSpline,
    StateSpace,
    Transition,
    Weibull,
    build_parameter_layout,
    coef_path,
    difference_matrix,
    load_spec,
    penalty_matrix,
    spec_from_config,
    spec_to_config,
)
from .predict import (
    KaplanMeier,
    PredictionCurve,
    PredictionResult,
    SurvivalCurves,
    kaplan_meier,
    predict_curve,
    predict_matrix,
    survival_curves,
)
from .scoring import (
    FitOptions,
    FitResult,
    SearchResult,
    aic,
    default_start_values,
    degrees_of_freedom,
    fit,
    lambda_search,
    load_fit,
    save_fit,
)
from .simulate import (
    StudyDesign,
    design_from_config,
    design_to_config,
    latent_state_at,
    simulate_panel,
    state_table,
)

__all__ = [
    "__version__",
    "Constraint",
    "DataValidationError",
    "Exponential",
    "ExtrapolationWarning",
    "FitOptions",
    "FitResult",
    "Gompertz",
    "GridPolicy",
    "HazardDomainError",
    "KaplanMeier",
    "Model",
    "ModelConfigError",
    "ModelSpec",
    "NumericalError",
    "PSpline",
    "PanelDataset",
    "ParameterLayout",
    "PredictionCurve",
    "PredictionResult",
    "SearchResult",
    "SplineBasis",
    "StateSpace",
    "StudyDesign",
    "SurvivalCurves",
    "Transition",
    "TransitionHazard",
    "Weibull",
    "aic",
    "build_generator",
    "build_generators",
    "build_model",
    "build_parameter_layout",
    "chain_matrices",
    "coef_path",
    "dataset_from_frame",
    "dataset_loglik",
    "dataset_report",
    "default_start_values",
    "degrees_of_freedom",
    "design_from_config",
    "design_to_config",
    "difference_matrix",
    "fit",
    "grid_cells",
    "interval_matrices",
    "kaplan_meier",
    "lambda_search",
    "latent_state_at",
    "load_fit",
    "load_panel",
    "load_spec",
    "penalty_matrix",
    "predict_curve",
    "predict_matrix",
    "save_fit",
    "save_panel",
    "simulate_panel",
    "spec_from_config",
    "spec_to_config",
    "state_table",
    "subject_terms",
    "survival_curves",
    "transition_matrices",
    "validate_panel",
]
