"""Transition-probability prediction with Monte Carlo uncertainty bands.

Point estimates chain per-cell matrix exponentials along an imposed grid
anchored at the prediction start.  Uncertainty comes from resampling the
parameter vector from its estimated normal: draws are mapped through the
same grid product, and elementwise means, standard errors and quantile
bands are reported.  Because every draw produces a row-stochastic matrix,
the bands respect [0, 1] by construction.  The module also builds
model-based survival curves per subject alongside Kaplan-Meier estimates
for validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataValidationError, ModelConfigError, NumericalError
from .hazards import Model
from .likelihood import PanelDataset, model_covariate_matrix
from .markov import _absorbing_indices, build_generators, transition_matrices

DEFAULT_DRAWS = 1000
DEFAULT_STEP = 0.5
QUANTILES = (0.025, 0.975)


def covariate_vector(model: Model, x) -> np.ndarray:
    """Normalise a covariate profile (mapping or sequence) to model order."""
    names = model.spec.covariate_names
    if x is None:
        if names:
            raise ModelConfigError(f"model needs covariate values for {names}")
        return np.zeros(0)
    if isinstance(x, dict):
        unknown = sorted(set(x) - set(names))
        if unknown:
            raise ModelConfigError(f"unknown covariate(s) {unknown}; model uses {names}")
        missing = [n for n in names if n not in x]
        if missing:
            raise ModelConfigError(f"missing covariate value(s) {missing}")
        return np.asarray([float(x[n]) for n in names])
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.shape != (len(names),):
        raise ModelConfigError(
            f"covariate vector must have length {len(names)} (order {names}), "
            f"got shape {arr.shape}"
        )
    return arr


def sampling_root(cov: np.ndarray, clip_covariance: bool = False) -> np.ndarray:
    """Matrix L with L L^T = cov for normal sampling.

    Uses the Cholesky factor when the covariance is positive definite; a
    zero matrix passes through as-is (degenerate sampler).  Otherwise the
    failure is reported, unless ``clip_covariance`` allows projecting onto
    the nearest PSD matrix by clipping negative eigenvalues at zero.
    """
    cov = np.asarray(cov, dtype=float)
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        if not clip_covariance:
            raise NumericalError(
                "covariance matrix is not positive definite; pass "
                "clip_covariance=True to sample from its nearest PSD projection",
                context={"min_eigenvalue": float(np.linalg.eigvalsh(cov).min())},
            ) from None
        evals, evecs = np.linalg.eigh((cov + cov.T) / 2.0)
        return evecs * np.sqrt(np.clip(evals, 0.0, None))


def _curve_bounds(t1: float, t2: float, h: float) -> np.ndarray:
    """Grid t1, t1+h, ..., t2 with a possibly short final cell."""
    if t2 < t1:
        raise ModelConfigError(f"prediction horizon runs backwards: ({t1}, {t2})")
    if h <= 0:
        raise ModelConfigError(f"grid step must be positive, got {h}")
    n_full = int(math.ceil((t2 - t1) / h - 1e-9))
    bounds = np.empty(n_full + 1)
    bounds[:n_full] = t1 + h * np.arange(n_full)
    bounds[-1] = t2
    return bounds


def _cell_paths(model: Model, thetas: np.ndarray, bounds: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Cumulative interval products for each parameter vector.

    ``thetas`` is (B, q); the return value is (B, T, D, D) where T counts
    the grid points in ``bounds`` and entry [b, m] is the transition matrix
    from bounds[0] to bounds[m] under parameter vector b.
    """
    B = thetas.shape[0]
    D = model.n_states
    M = bounds.shape[0] - 1
    t_evals = bounds[:-1]
    dts = np.diff(bounds)
    absorbing = _absorbing_indices(model)
    X = np.broadcast_to(x, (M, x.shape[0]))
    cells = np.empty((B, M, D, D))
    # Exponentiate in flat blocks across draws; generators must still be
    # built per draw since rates are nonlinear in the parameters.
    block = max(1, 20000 // max(M, 1))
    for a in range(0, B, block):
        stop = min(a + block, B)
        Qs = np.empty((stop - a, M, D, D))
        for b in range(a, stop):
            Qs[b - a] = build_generators(model, thetas[b], t_evals, X)
        flat = transition_matrices(
            Qs.reshape(-1, D, D), np.tile(dts, stop - a), absorbing=absorbing
        )
        cells[a:stop] = flat.reshape(stop - a, M, D, D)
    paths = np.empty((B, M + 1, D, D))
    paths[:, 0] = np.eye(D)
    for m in range(M):
        paths[:, m + 1] = paths[:, m] @ cells[:, m]
    return paths


@dataclass(frozen=True, eq=False)
class PredictionCurve:
    """Transition probabilities from ``t1`` to each grid time, with bands."""

    t1: float
    times: np.ndarray  # (T,) absolute times, starting at t1
    point: np.ndarray  # (T, D, D)
    mc_mean: np.ndarray
    mc_se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_draws: int
    seed: int


@dataclass(frozen=True, eq=False)
class PredictionResult:
    """Single-horizon transition matrix estimate with MC uncertainty."""

    point: np.ndarray  # (D, D)
    mc_mean: np.ndarray
    mc_se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_draws: int
    seed: int
    t1: float
    t2: float


def predict_curve(
    model: Model,
    theta,
    cov,
    t1: float,
    t2: float,
    x=None,
    h: float = DEFAULT_STEP,
    n_draws: int = DEFAULT_DRAWS,
    seed: int = 0,
    clip_covariance: bool = False,
) -> PredictionCurve:
    """Predicted transition probabilities along the grid from t1 to t2.

    Each of the ``n_draws`` parameter draws theta + L z is pushed through
    the full grid product, so the bands are coherent along the curve.  Draw
    b uses its own generator seeded by (seed, b): results are independent
    of evaluation order and reproducible bit-for-bit.
    """
    theta = np.asarray(theta, dtype=float)
    x = covariate_vector(model, x)
    if n_draws < 1:
        raise ModelConfigError(f"need at least one draw, got {n_draws}")
    bounds = _curve_bounds(t1, t2, h)
    L = sampling_root(np.asarray(cov, dtype=float), clip_covariance)
    z = np.empty((n_draws, model.n_free))
    for b in range(n_draws):
        z[b] = np.random.default_rng([seed, b]).standard_normal(model.n_free)
    thetas = theta[None, :] + z @ L.T

    point = _cell_paths(model, theta[None, :], bounds, x)[0]
    draws = _cell_paths(model, thetas, bounds, x)
    mc_mean = draws.mean(axis=0)
    mc_se = draws.std(axis=0, ddof=1) if n_draws > 1 else np.zeros_like(mc_mean)
    lower = np.quantile(draws, QUANTILES[0], axis=0)
    upper = np.quantile(draws, QUANTILES[1], axis=0)
    return PredictionCurve(
        t1=float(t1),
        times=bounds.copy(),
        point=point,
        mc_mean=mc_mean,
        mc_se=mc_se,
        lower=lower,
        upper=upper,
        n_draws=n_draws,
        seed=seed,
    )


def predict_matrix(
    model: Model,
    theta,
    cov,
    t1: float,
    t2: float,
    x=None,
    h: float = DEFAULT_STEP,
    n_draws: int = DEFAULT_DRAWS,
    seed: int = 0,
    clip_covariance: bool = False,
) -> PredictionResult:
    """Transition matrix from t1 to t2 with Monte Carlo uncertainty."""
    if t2 == t1:
        D = model.n_states
        eye = np.eye(D)
        zero = np.zeros((D, D))
        return PredictionResult(
            point=eye.copy(),
            mc_mean=eye.copy(),
            mc_se=zero.copy(),
            lower=eye.copy(),
            upper=eye.copy(),
            n_draws=n_draws,
            seed=seed,
            t1=float(t1),
            t2=float(t2),
        )
    curve = predict_curve(
        model, theta, cov, t1, t2, x=x, h=h, n_draws=n_draws, seed=seed,
        clip_covariance=clip_covariance,
    )
    return PredictionResult(
        point=curve.point[-1],
        mc_mean=curve.mc_mean[-1],
        mc_se=curve.mc_se[-1],
        lower=curve.lower[-1],
        upper=curve.upper[-1],
        n_draws=n_draws,
        seed=seed,
        t1=float(t1),
        t2=float(t2),
    )


@dataclass(frozen=True, eq=False)
class KaplanMeier:
    """Product-limit survival estimate with Greenwood 95% bands."""

    event_times: np.ndarray  # unique death times, ascending
    survival: np.ndarray  # estimate just after each event time
    variance: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray

    def evaluate(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Step-function values (survival, lower, upper) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.event_times.size == 0:
            ones = np.ones_like(t)
            return ones, ones.copy(), ones.copy()
        idx = np.searchsorted(self.event_times, t, side="right") - 1
        surv = np.where(idx >= 0, self.survival[np.maximum(idx, 0)], 1.0)
        lo = np.where(idx >= 0, self.lower[np.maximum(idx, 0)], 1.0)
        hi = np.where(idx >= 0, self.upper[np.maximum(idx, 0)], 1.0)
        return surv, lo, hi


def kaplan_meier(times, events) -> KaplanMeier:
    """Product-limit estimator from durations and 0/1 event indicators.

    Ties between deaths and censorings at the same instant follow the usual
    convention: the censored subjects are still at risk for that death.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    events = np.atleast_1d(np.asarray(events))
    if times.size == 0:
        raise DataValidationError("no observations for the Kaplan-Meier estimate")
    if times.shape != events.shape:
        raise DataValidationError("times and event flags differ in length")
    if np.any(times < 0):
        raise DataValidationError("negative duration in Kaplan-Meier input")
    death_times = np.unique(times[np.asarray(events, dtype=bool)])
    surv = np.empty(death_times.shape[0])
    var_sum = np.empty_like(surv)
    n_risk = np.empty(death_times.shape[0], dtype=np.int64)
    n_dead = np.empty_like(n_risk)
    s = 1.0
    g = 0.0  # running Greenwood sum
    for k, tk in enumerate(death_times):
        n_k = int(np.count_nonzero(times >= tk))
        d_k = int(np.count_nonzero((times == tk) & (np.asarray(events, dtype=bool))))
        s *= 1.0 - d_k / n_k
        if n_k > d_k:
            g += d_k / (n_k * (n_k - d_k))
        else:
            g = np.inf
        n_risk[k] = n_k
        n_dead[k] = d_k
        surv[k] = s
        var_sum[k] = g
    # once survival reaches zero the Greenwood sum is infinite; the
    # variance of the (degenerate) estimate is zero there
    alive = surv > 0
    variance = np.zeros_like(surv)
    variance[alive] = surv[alive] ** 2 * var_sum[alive]
    half = 1.959963984540054 * np.sqrt(variance)
    lower = np.clip(surv - half, 0.0, 1.0)
    upper = np.clip(surv + half, 0.0, 1.0)
    return KaplanMeier(
        event_times=death_times,
        survival=surv,
        variance=variance,
        lower=lower,
        upper=upper,
        n_at_risk=n_risk,
        n_events=n_dead,
    )


@dataclass(frozen=True, eq=False)
class SurvivalCurves:
    """Model-based survival per subject vs the Kaplan-Meier estimate.

    Times are offsets since each subject's first visit; ``curves[i]`` is
    subject i's probability of not yet being absorbed, computed from their
    own baseline time and covariates.
    """

    baseline_state: int
    times: np.ndarray  # (T,) offsets, starting at 0
    subject_ids: np.ndarray
    curves: np.ndarray  # (n_subjects, T)
    mean: np.ndarray  # (T,)
    km: KaplanMeier
    durations: np.ndarray
    events: np.ndarray


def survival_curves(
    model: Model,
    theta,
    data: PanelDataset,
    baseline_state: int,
    horizon: float,
    h: float = DEFAULT_STEP,
) -> SurvivalCurves:
    """Survival from one baseline state: model curves and Kaplan-Meier.

    Selects the subjects whose first observed state equals
    ``baseline_state``, pushes each through the grid product from their own
    first visit with their own covariates, and compares the mean curve with
    the product-limit estimate built from the same subjects' follow-up
    durations and death indicators.
    """
    theta = np.asarray(theta, dtype=float)
    if baseline_state in model.spec.states.absorbing:
        raise ModelConfigError(f"baseline state {baseline_state} is absorbing")
    first = data.first_rows
    chosen = np.nonzero(data.states[first] == baseline_state)[0]
    if chosen.size == 0:
        raise DataValidationError(f"no subjects start in state {baseline_state}")
    Xmat = model_covariate_matrix(model, data)
    absorbing = _absorbing_indices(model)
    offsets = _curve_bounds(0.0, float(horizon), h)
    M = offsets.shape[0] - 1
    r0 = baseline_state - 1

    n = chosen.size
    curves = np.empty((n, offsets.shape[0]))
    curves[:, 0] = 1.0
    # One flat stack over (subject, cell): each subject's grid starts at
    # their own first visit, so evaluation times differ per subject.
    t_first = data.times[first[chosen]]
    t_evals = (t_first[:, None] + offsets[None, :-1]).ravel()
    dts = np.broadcast_to(np.diff(offsets), (n, M)).ravel()
    X = np.repeat(Xmat[first[chosen]], M, axis=0)
    Q = build_generators(model, theta, t_evals, X)
    P_cells = transition_matrices(Q, dts, absorbing=absorbing).reshape(n, M, *Q.shape[1:])
    running = np.broadcast_to(np.eye(model.n_states), P_cells.shape[0:1] + Q.shape[1:]).copy()
    for m in range(M):
        running = running @ P_cells[:, m]
        curves[:, m + 1] = 1.0 - running[:, r0, :][:, absorbing].sum(axis=1)

    last = data.final_rows[chosen]
    durations = data.times[last] - data.times[first[chosen]]
    events = data.death[last]
    km = kaplan_meier(durations, events)
    return SurvivalCurves(
        baseline_state=baseline_state,
        times=offsets.copy(),
        subject_ids=data.subject_ids[chosen],
        curves=curves,
        mean=curves.mean(axis=0),
        km=km,
        durations=durations,
        events=events.astype(np.int64),
    )
