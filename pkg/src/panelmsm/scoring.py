"""Penalised maximum likelihood fitting and smoothing-parameter selection.

The update is Fisher scoring on the penalised log likelihood: the score is
the likelihood score minus J theta, the curvature is the outer-product
information estimate plus J, and each proposed step is halved until the
penalised log likelihood does not decrease.  Effective degrees of freedom
follow the trace formula tr[M (M + J)^-1], and AIC combines the penalised
log likelihood with those degrees of freedom.  Smoothing parameters are
selected by exhaustive grid search over per-block log10 grids with warm
starts between neighbouring grid points.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelConfigError, NumericalError
from .hazards import Model, SplineBasis, build_model
from .likelihood import PanelDataset, dataset_loglik, dataset_report
from .markov import GridPolicy
from .modelspec import (
    ROLE_INTERCEPT,
    ROLE_LOGSHAPE,
    ROLE_SPLINE,
    Weibull,
    spec_from_config,
    spec_to_config,
)

# Relative floor on the smallest eigenvalue of the penalised information
# before the system is declared singular.
_SINGULAR_RTOL = 1e-12
# Slack allowed when requiring the penalised log likelihood not to decrease.
_STEP_SLACK = 1e-10


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 100
    tol: float = 1e-6
    max_halvings: int = 20
    policy: GridPolicy = field(default_factory=GridPolicy)
    threads: int = 1


@dataclass(frozen=True, eq=False)
class FitResult:
    """Converged (or capped) state of one penalised fit."""

    model: Model
    theta: np.ndarray
    se: np.ndarray
    covariance: np.ndarray
    loglik: float
    penalised_loglik: float
    df: float
    aic: float
    lambdas: tuple[float, ...]
    iterations: int
    converged: bool
    trace: list[dict]
    policy: GridPolicy
    n_subjects: int
    n_rows: int

    @property
    def theta_names(self) -> tuple[str, ...]:
        return self.model.layout.theta_names

    def named_theta(self) -> dict[str, float]:
        return dict(zip(self.theta_names, self.theta.tolist()))


def default_start_values(model: Model) -> np.ndarray:
    """Starting vector: low constant log hazards, neutral everything else.

    Intercepts start at -3 (-10 for Weibull transitions, whose rate picks
    up an extra t^(shape-1) factor), Weibull log shapes at 0.5, spline
    coefficients at -3 so the spline starts as the same flat log hazard,
    and slopes and covariate effects at 0.
    """
    layout = model.layout
    starts = np.asarray([sl.start for sl in layout.transition_slices])
    theta0 = np.zeros(model.n_free)
    for slot in range(model.n_free):
        role = layout.theta_roles[slot]
        coef_idx = int(layout.theta_to_coef[slot])
        tr_idx = int(np.searchsorted(starts, coef_idx, side="right") - 1)
        fam = model.spec.transitions[tr_idx].family
        if role == ROLE_INTERCEPT:
            theta0[slot] = -10.0 if isinstance(fam, Weibull) else -3.0
        elif role == ROLE_LOGSHAPE:
            theta0[slot] = 0.5
        elif role == ROLE_SPLINE:
            theta0[slot] = -3.0
    return theta0


def degrees_of_freedom(information: np.ndarray, penalty: np.ndarray) -> float:
    """Effective degrees of freedom tr[M (M + J)^-1].

    A zero penalty short-circuits to the exact parameter count.  When the
    smoothing weight is huge, M + J spans many decades and its raw
    eigendecomposition only resolves the small (information-scale)
    eigenpairs to the penalty's absolute rounding level, which shows up as
    1e-4-sized wobble in the trace.  So the trace is taken in the
    penalty's own eigenbasis instead: the penalty's null space is
    structural (the polynomials its difference operator kills), so
    eigenvalues at rounding scale are snapped to exact zero, the
    information is rotated into that basis, and the system is Jacobi
    equilibrated.  Heavily penalised directions are then diagonal, and the
    equilibrated solve stays well conditioned at any smoothing weight.
    """
    q = information.shape[0]
    if not np.any(penalty):
        return float(q)
    M = (information + information.T) / 2.0
    J = (penalty + penalty.T) / 2.0
    gamma, basis = np.linalg.eigh(J)
    gamma[gamma < q * np.finfo(float).eps * gamma[-1]] = 0.0
    Mrot = basis.T @ M @ basis
    R = Mrot + np.diag(gamma)
    d = np.diag(R)
    # the penalty inflates parts of the spectrum on purpose, so gauge
    # near-singularity against the information's own scale
    scale = max(1.0, float(np.linalg.norm(information, 2)))
    if d.min() <= _SINGULAR_RTOL * scale:
        raise NumericalError(
            "penalised information is numerically singular in the degrees-of-"
            "freedom trace",
            context={"diagonal": d.tolist()},
        )
    s = 1.0 / np.sqrt(d)
    Rs = R * s[:, None] * s[None, :]
    evals, evecs = np.linalg.eigh(Rs)
    if evals[0] <= 0 or evals[0] < _SINGULAR_RTOL * evals[-1]:
        raise NumericalError(
            "penalised information is numerically singular in the degrees-of-"
            "freedom trace",
            context={"eigenvalues": evals.tolist()},
        )
    Ms = Mrot * s[:, None] * s[None, :]
    inner = evecs.T @ Ms @ evecs
    df = float((np.diag(inner) / evals).sum())
    return min(max(df, np.finfo(float).tiny), float(q))


def aic(penalised_loglik: float, df: float) -> float:
    """AIC on the penalised log likelihood: -2 * penalised + 2 * df."""
    return -2.0 * penalised_loglik + 2.0 * df


def _diagnose_singular(Mp: np.ndarray, names, scale=None) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of the penalised information, or a named error.

    ``scale`` is the size of the unpenalised information; with a huge
    smoothing parameter the top of Mp's spectrum is dominated by the
    penalty, which says nothing about identification.
    """
    evals, evecs = np.linalg.eigh((Mp + Mp.T) / 2.0)
    floor = _SINGULAR_RTOL * (evals[-1] if scale is None else max(1.0, scale))
    if evals[0] <= 0 or evals[0] < floor:
        direction = evecs[:, 0]
        weight = np.abs(direction)
        involved = [names[k] for k in np.nonzero(weight > 0.3)[0]]
        if not involved:
            involved = [names[int(np.argmax(weight))]]
        raise NumericalError(
            "penalised information matrix is singular; the flat direction "
            f"involves {involved} (smallest eigenvalue {evals[0]:.3e}); the "
            "parameter(s) are not identified by these data",
            context={"parameters": involved, "eigenvalue": float(evals[0])},
        )
    return evals, evecs


def fit(
    model: Model,
    data: PanelDataset,
    lambdas=(),
    theta0=None,
    options: FitOptions | None = None,
) -> FitResult:
    """Maximise the penalised log likelihood by safeguarded Fisher scoring.

    Stops when the L1 change of the parameter vector falls below
    ``options.tol`` or the iteration cap is reached; the returned trace has
    one entry per visited iterate whatever the outcome.
    """
    options = options or FitOptions()
    lambdas = tuple(float(v) for v in np.ravel(np.asarray(lambdas, dtype=float)))
    if len(lambdas) != model.n_penalty_blocks:
        raise ModelConfigError(
            f"model has {model.n_penalty_blocks} spline block(s) but "
            f"{len(lambdas)} smoothing parameter(s) were given"
        )
    J = model.penalty(lambdas) if model.n_penalty_blocks else np.zeros((model.n_free, model.n_free))
    theta = default_start_values(model) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    if theta.shape != (model.n_free,):
        raise ModelConfigError(
            f"theta0 must have length {model.n_free}, got shape {theta.shape}"
        )
    if not np.all(np.isfinite(theta)):
        raise ModelConfigError("theta0 has non-finite entries")

    names = model.layout.theta_names
    trace: list[dict] = []
    converged = False
    iterations = 0

    report = dataset_report(model, theta, data, options.policy, threads=options.threads)
    pen = 0.5 * theta @ J @ theta
    pl = report.loglik - pen
    if not np.isfinite(pl):
        raise NumericalError(
            f"penalised log likelihood is not finite at the starting values ({pl})",
            context={"loglik": report.loglik, "penalty": pen},
        )

    for v in range(options.max_iter):
        Sp = report.score - J @ theta
        Mp = report.information + J
        trace.append(
            {
                "iteration": v,
                "theta": theta.tolist(),
                "penalised_loglik": float(pl),
                "loglik": float(report.loglik),
                "score_inf_norm": float(np.abs(Sp).max()),
            }
        )
        m_scale = float(np.linalg.norm(report.information, 2))
        evals, evecs = _diagnose_singular(Mp, names, m_scale)
        delta = evecs @ ((evecs.T @ Sp) / evals)

        step = 1.0
        accepted = None
        for _ in range(options.max_halvings + 1):
            cand = theta + step * delta
            try:
                ll_cand, _ = dataset_loglik(model, cand, data, options.policy)
            except NumericalError:
                step *= 0.5
                continue
            pl_cand = ll_cand - 0.5 * cand @ J @ cand
            if np.isfinite(pl_cand) and pl_cand >= pl - _STEP_SLACK:
                accepted = (cand, pl_cand)
                break
            step *= 0.5
        iterations = v + 1
        trace[-1]["step"] = step
        if accepted is None:
            break
        theta_new, _ = accepted
        change = float(np.abs(theta_new - theta).sum())
        theta = theta_new
        report = dataset_report(model, theta, data, options.policy, threads=options.threads)
        pl = report.loglik - 0.5 * theta @ J @ theta
        if change < options.tol:
            converged = True
            break

    Sp = report.score - J @ theta
    Mp = report.information + J
    trace.append(
        {
            "iteration": iterations,
            "theta": theta.tolist(),
            "penalised_loglik": float(pl),
            "loglik": float(report.loglik),
            "score_inf_norm": float(np.abs(Sp).max()),
        }
    )
    evals, evecs = _diagnose_singular(Mp, names, float(np.linalg.norm(report.information, 2)))
    covariance = (evecs / evals) @ evecs.T
    covariance = (covariance + covariance.T) / 2.0
    df = degrees_of_freedom(report.information, J)
    pl_final = float(pl)
    return FitResult(
        model=model,
        theta=theta,
        se=np.sqrt(np.diag(covariance)),
        covariance=covariance,
        loglik=float(report.loglik),
        penalised_loglik=pl_final,
        df=df,
        aic=aic(pl_final, df),
        lambdas=lambdas,
        iterations=iterations,
        converged=converged,
        trace=trace,
        policy=options.policy,
        n_subjects=data.n_subjects,
        n_rows=data.n_rows,
    )


@dataclass(frozen=True, eq=False)
class SearchResult:
    """Outcome of an AIC grid search over smoothing parameters."""

    surface: list[dict]
    best_fit: FitResult
    best_lambdas: tuple[float, ...]
    plateau_blocks: tuple[int, ...]
    recommended_lambdas: tuple[float, ...] | None
    pinned: bool


def lambda_search(
    model: Model,
    data: PanelDataset,
    grids=None,
    theta0=None,
    options: FitOptions | None = None,
    pin_plateau: bool = False,
    plateau_tol: float = 0.1,
) -> SearchResult:
    """Fit every point of the per-block log10 smoothing grid, pick min AIC.

    Fits walk the grid in lexicographic order, each warm-started from the
    previous point's estimate.  When the minimiser sits on a block's upper
    grid edge and the AIC there is within ``plateau_tol`` of the
    next-largest value, the block is flagged as a plateau: the data want an
    effectively infinite penalty, and a pinned value four decades above the
    grid is recommended (and refit when ``pin_plateau`` is set).
    """
    if model.n_penalty_blocks == 0:
        raise ModelConfigError("model has no spline blocks; nothing to search")
    if grids is None:
        grids = model.spec.lambda_log10_grids
    if grids is None:
        raise ModelConfigError(
            "no smoothing grid: pass grids or set lambda_grid in the model config"
        )
    grids = [np.asarray(g, dtype=float) for g in grids]
    if len(grids) != model.n_penalty_blocks or any(g.size == 0 for g in grids):
        raise ModelConfigError(
            f"need one nonempty log10 grid per spline block "
            f"({model.n_penalty_blocks}), got {[g.size for g in grids]}"
        )

    surface: list[dict] = []
    fits: dict[tuple[float, ...], FitResult] = {}
    warm = theta0
    failures: list[str] = []
    for log10s in itertools.product(*grids):
        key = tuple(float(v) for v in log10s)
        lambdas = tuple(10.0**v for v in key)
        try:
            result = fit(model, data, lambdas, theta0=warm, options=options)
        except NumericalError as exc:
            failures.append(f"lambda={lambdas}: {exc}")
            surface.append(
                {
                    "log10_lambdas": list(key),
                    "lambdas": list(lambdas),
                    "aic": np.nan,
                    "df": np.nan,
                    "minus2_penalised_loglik": np.nan,
                    "converged": False,
                }
            )
            continue
        fits[key] = result
        if result.converged:
            warm = result.theta
        surface.append(
            {
                "log10_lambdas": list(key),
                "lambdas": list(lambdas),
                "aic": result.aic,
                "df": result.df,
                "minus2_penalised_loglik": -2.0 * result.penalised_loglik,
                "converged": result.converged,
            }
        )
    usable = {k: r for k, r in fits.items() if r.converged}
    if not usable:
        raise NumericalError(
            "every smoothing grid point failed to fit",
            context={"failures": failures},
        )
    best_key = min(usable, key=lambda k: usable[k].aic)
    best = usable[best_key]

    plateau = []
    for j, grid in enumerate(grids):
        ordered = np.sort(grid)
        if best_key[j] != ordered[-1] or ordered.size < 2:
            continue
        neighbour = best_key[:j] + (float(ordered[-2]),) + best_key[j + 1 :]
        other = usable.get(neighbour)
        if other is not None and abs(other.aic - best.aic) < plateau_tol:
            plateau.append(j)
    recommended = None
    if plateau:
        rec = list(best.lambdas)
        for j in plateau:
            rec[j] = float(10.0 ** (np.sort(grids[j])[-1] + 4.0))
        recommended = tuple(rec)

    pinned = False
    if pin_plateau and recommended is not None:
        pinned_fit = fit(model, data, recommended, theta0=best.theta, options=options)
        if pinned_fit.converged:
            best = pinned_fit
            pinned = True
            surface.append(
                {
                    "log10_lambdas": [float(np.log10(v)) for v in recommended],
                    "lambdas": list(recommended),
                    "aic": pinned_fit.aic,
                    "df": pinned_fit.df,
                    "minus2_penalised_loglik": -2.0 * pinned_fit.penalised_loglik,
                    "converged": True,
                }
            )
    return SearchResult(
        surface=surface,
        best_fit=best,
        best_lambdas=best.lambdas,
        plateau_blocks=tuple(plateau),
        recommended_lambdas=recommended,
        pinned=pinned,
    )


def fit_to_dict(result: FitResult) -> dict:
    """JSON-ready view of a fit, complete enough to rebuild the model."""
    model = result.model
    bases = {
        str(i): {"knots": basis.knots.tolist(), "degree": basis.degree}
        for i, basis in model.spline_bases().items()
    }
    return {
        "model_config": spec_to_config(model.spec),
        "time_range": list(model.time_range) if model.time_range is not None else None,
        "bases": bases,
        "grid_policy": {
            "kind": result.policy.kind,
            "step": result.policy.step,
            "anchor": result.policy.anchor,
        },
        "lambdas": list(result.lambdas),
        "parameter_names": list(result.theta_names),
        "theta": result.theta.tolist(),
        "se": result.se.tolist(),
        "covariance": result.covariance.tolist(),
        "loglik": result.loglik,
        "penalised_loglik": result.penalised_loglik,
        "minus2_loglik": -2.0 * result.loglik,
        "minus2_penalised_loglik": -2.0 * result.penalised_loglik,
        "df": result.df,
        "aic": result.aic,
        "iterations": result.iterations,
        "converged": result.converged,
        "trace": result.trace,
        "n_subjects": result.n_subjects,
        "n_rows": result.n_rows,
    }


def fit_from_dict(payload: dict) -> FitResult:
    """Rebuild a fit (and its compiled model) from ``fit_to_dict`` output."""
    spec = spec_from_config(payload["model_config"])
    bases = {
        int(i): SplineBasis(knots=np.asarray(b["knots"], dtype=float), degree=int(b["degree"]))
        for i, b in payload.get("bases", {}).items()
    }
    time_range = tuple(payload["time_range"]) if payload.get("time_range") else None
    model = build_model(spec, time_range, bases=bases)
    policy_raw = payload.get("grid_policy", {})
    policy = GridPolicy(
        kind=policy_raw.get("kind", "data"),
        step=float(policy_raw.get("step", 0.5)),
        anchor=float(policy_raw.get("anchor", 0.0)),
    )
    stored_names = list(payload.get("parameter_names", []))
    if stored_names and stored_names != list(model.layout.theta_names):
        raise ModelConfigError(
            "stored parameter names do not match the rebuilt model layout; "
            "the fit file is inconsistent"
        )
    return FitResult(
        model=model,
        theta=np.asarray(payload["theta"], dtype=float),
        se=np.asarray(payload["se"], dtype=float),
        covariance=np.asarray(payload["covariance"], dtype=float),
        loglik=float(payload["loglik"]),
        penalised_loglik=float(payload["penalised_loglik"]),
        df=float(payload["df"]),
        aic=float(payload["aic"]),
        lambdas=tuple(float(v) for v in payload.get("lambdas", [])),
        iterations=int(payload.get("iterations", 0)),
        converged=bool(payload.get("converged", False)),
        trace=list(payload.get("trace", [])),
        policy=policy,
        n_subjects=int(payload.get("n_subjects", 0)),
        n_rows=int(payload.get("n_rows", 0)),
    )


def save_fit(result: FitResult, path) -> None:
    with open(path, "w") as fh:
        json.dump(fit_to_dict(result), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_fit(path) -> FitResult:
    with open(path) as fh:
        return fit_from_dict(json.load(fh))
