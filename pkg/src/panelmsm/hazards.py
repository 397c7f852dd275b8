"""Transition hazard evaluation: parametric families and B-spline baselines.

Every transition hazard is positive by construction: the log hazard is an
affine or spline function of time plus a linear covariate term, and rates
are recovered with an exponential.  ``TransitionHazard.rate_and_grad``
returns both the rate and its gradient with respect to the transition's own
coefficient block, vectorised over evaluation rows, which is all the
likelihood machinery needs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import ExtrapolationWarning, HazardDomainError, ModelConfigError
from .modelspec import (
    Exponential,
    Gompertz,
    ModelSpec,
    ParameterLayout,
    PSpline,
    PenaltySpec,
    Transition,
    Weibull,
    build_parameter_layout,
)

# Slack allowed before an out-of-domain evaluation triggers a warning; pure
# floating-point jitter at the boundary should stay silent.
_DOMAIN_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Cubic-by-default B-spline basis on an equidistant knot grid.

    The basis covers the closed interval ``domain``; evaluation outside it
    clamps to the nearest endpoint (constant extrapolation of the log
    hazard) and emits ``ExtrapolationWarning``.
    """

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if knots.ndim != 1 or knots.size < 2 * (self.degree + 1):
            raise ModelConfigError("knot vector too short for the spline degree")
        steps = np.diff(knots)
        if np.any(steps <= 0):
            raise ModelConfigError("knots must be strictly increasing")
        if not np.allclose(steps, steps[0], rtol=1e-8, atol=0.0):
            raise ModelConfigError("knots must be equidistant")

    @classmethod
    def from_domain(cls, low: float, high: float, n_basis: int, degree: int = 3) -> "SplineBasis":
        """Basis whose support interval is exactly [low, high].

        Places ``n_basis - degree`` equal cells on [low, high] and extends
        ``degree`` further knots past each end so every point of the domain
        has full polynomial support.
        """
        if not high > low:
            raise ModelConfigError(f"need high > low, got [{low}, {high}]")
        ndx = n_basis - degree
        if ndx < 1:
            raise ModelConfigError(
                f"need n_basis > degree, got n_basis={n_basis}, degree={degree}"
            )
        dx = (high - low) / ndx
        knots = np.linspace(low - degree * dx, high + degree * dx, n_basis + degree + 1)
        return cls(knots=knots, degree=degree)

    @classmethod
    def for_data(cls, t_min: float, t_max: float, n_basis: int, degree: int = 3) -> "SplineBasis":
        """Basis sized to observed times, with one spare cell past the maximum.

        The spare cell keeps the largest observation strictly inside the
        domain, so a fitted hazard can be evaluated a little beyond the last
        visit without clamping.
        """
        if not t_max > t_min:
            raise ModelConfigError(f"need t_max > t_min, got [{t_min}, {t_max}]")
        ndx = n_basis - degree
        if ndx < 2:
            raise ModelConfigError(
                f"need n_basis >= degree + 2 to size a basis from data, got "
                f"n_basis={n_basis}, degree={degree}"
            )
        dx = (t_max - t_min) / (ndx - 1)
        return cls.from_domain(t_min, t_max + dx, n_basis, degree)

    @property
    def n_basis(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return (float(self.knots[self.degree]), float(self.knots[-(self.degree + 1)]))

    def design(self, t: np.ndarray) -> np.ndarray:
        """Dense design matrix, shape (len(t), n_basis)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        low, high = self.domain
        slack = _DOMAIN_SLACK * max(1.0, abs(low), abs(high))
        n_out = int(np.count_nonzero((t < low - slack) | (t > high + slack)))
        if n_out:
            warnings.warn(
                f"{n_out} time value(s) outside spline domain [{low:g}, {high:g}]; "
                "clamping to the boundary",
                ExtrapolationWarning,
                stacklevel=2,
            )
        t = np.clip(t, low, high)
        design = BSpline.design_matrix(t, self.knots, self.degree)
        return design.toarray()


@dataclass(frozen=True, eq=False)
class TransitionHazard:
    """Rate evaluator for one transition's coefficient block."""

    transition: Transition
    coef_slice: slice
    basis: SplineBasis | None = None

    def __post_init__(self):
        if isinstance(self.transition.family, PSpline):
            if self.basis is None:
                raise ModelConfigError(
                    f"spline transition {self.transition.edge} needs a basis"
                )
            if self.basis.n_basis != self.transition.family.n_basis:
                raise ModelConfigError(
                    f"basis has {self.basis.n_basis} functions but transition "
                    f"{self.transition.edge} declares {self.transition.family.n_basis}"
                )
            if self.basis.degree != self.transition.family.degree:
                raise ModelConfigError(
                    f"basis degree {self.basis.degree} does not match transition "
                    f"{self.transition.edge} degree {self.transition.family.degree}"
                )

    @property
    def n_baseline(self) -> int:
        return len(self.transition.family.baseline_coefs())

    @property
    def n_coef(self) -> int:
        return self.n_baseline + len(self.transition.covariates)

    def _check_shapes(self, t: np.ndarray, x: np.ndarray, coefs: np.ndarray):
        if coefs.shape != (self.n_coef,):
            raise ModelConfigError(
                f"transition {self.transition.edge} expects {self.n_coef} "
                f"coefficients, got shape {coefs.shape}"
            )
        if x.shape != (t.shape[0], len(self.transition.covariates)):
            raise ModelConfigError(
                f"transition {self.transition.edge} expects covariate array of "
                f"shape {(t.shape[0], len(self.transition.covariates))}, got {x.shape}"
            )

    def _linear_predictor(self, t, x, coefs, with_grad):
        fam = self.transition.family
        k = self.n_baseline
        n = t.shape[0]
        xb = x @ coefs[k:] if x.shape[1] else np.zeros(n)
        if isinstance(fam, Exponential):
            lp = coefs[0] + xb
            dbase = np.ones((n, 1)) if with_grad else None
        elif isinstance(fam, Gompertz):
            lp = coefs[0] + coefs[1] * t + xb
            dbase = np.column_stack([np.ones(n), t]) if with_grad else None
        elif isinstance(fam, Weibull):
            if np.any(t <= 0):
                raise HazardDomainError(
                    f"Weibull hazard on {self.transition.edge} needs strictly "
                    f"positive times (min seen: {t.min():g})"
                )
            shape = np.exp(coefs[1])
            logt = np.log(t)
            lp = coefs[0] + coefs[1] + (shape - 1.0) * logt + xb
            dbase = np.column_stack([np.ones(n), 1.0 + shape * logt]) if with_grad else None
        else:
            design = self.basis.design(t)
            lp = design @ coefs[:k] + xb
            dbase = design
        return lp, dbase

    def rate(self, t, x, coefs) -> np.ndarray:
        """Hazard rate at each row of (t, x)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float)
        coefs = np.asarray(coefs, dtype=float)
        self._check_shapes(t, x, coefs)
        lp, _ = self._linear_predictor(t, x, coefs, with_grad=False)
        return np.exp(lp)

    def rate_and_grad(self, t, x, coefs) -> tuple[np.ndarray, np.ndarray]:
        """Rate plus its gradient in the coefficient block, shape (n, n_coef).

        The gradient is the rate times the linear-predictor gradient, since
        the rate is the exponential of the linear predictor (the Weibull
        shape enters the predictor nonlinearly, which is folded in here).
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float)
        coefs = np.asarray(coefs, dtype=float)
        self._check_shapes(t, x, coefs)
        lp, dbase = self._linear_predictor(t, x, coefs, with_grad=True)
        rate = np.exp(lp)
        dlp = np.hstack([dbase, x]) if x.shape[1] else dbase
        return rate, rate[:, None] * dlp


@dataclass(frozen=True, eq=False)
class Model:
    """Compiled model: spec plus layout, bases and per-transition evaluators."""

    spec: ModelSpec
    layout: ParameterLayout
    hazards: tuple[TransitionHazard, ...]
    time_range: tuple[float, float] | None

    @property
    def n_free(self) -> int:
        return self.layout.n_free

    @property
    def n_states(self) -> int:
        return self.spec.states.n_states

    def penalty(self, lambdas) -> np.ndarray:
        return PenaltySpec(self.spec, self.layout).matrix(lambdas)

    @property
    def n_penalty_blocks(self) -> int:
        return len(self.spec.spline_transitions())

    def spline_bases(self) -> dict[int, SplineBasis]:
        return {
            i: self.hazards[i].basis
            for i in self.spec.spline_transitions()
        }


def build_model(
    spec: ModelSpec,
    time_range: tuple[float, float] | None = None,
    *,
    sized_from_data: bool = False,
    bases: dict[int, SplineBasis] | None = None,
) -> Model:
    """Attach bases and hazard evaluators to a declaration.

    ``time_range`` is required whenever the spec contains spline baselines,
    unless explicit ``bases`` (transition index -> basis) are given.  With
    ``sized_from_data=True`` the range is treated as the span of observed
    times and each basis gets a spare cell beyond the maximum; otherwise the
    range is used as the exact basis domain.
    """
    layout = build_parameter_layout(spec)
    spline_ids = spec.spline_transitions()
    resolved: dict[int, SplineBasis] = dict(bases or {})
    for i in spline_ids:
        if i in resolved:
            continue
        if time_range is None:
            raise ModelConfigError(
                "model has spline baselines; pass time_range or explicit bases"
            )
        fam = spec.transitions[i].family
        if sized_from_data:
            resolved[i] = SplineBasis.for_data(
                time_range[0], time_range[1], fam.n_basis, fam.degree
            )
        else:
            resolved[i] = SplineBasis.from_domain(
                time_range[0], time_range[1], fam.n_basis, fam.degree
            )
    hazards = tuple(
        TransitionHazard(
            transition=tr,
            coef_slice=layout.transition_slices[i],
            basis=resolved.get(i),
        )
        for i, tr in enumerate(spec.transitions)
    )
    return Model(spec=spec, layout=layout, hazards=hazards, time_range=time_range)
