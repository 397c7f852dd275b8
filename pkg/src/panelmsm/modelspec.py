"""Model declaration: state space, transitions, hazard families, constraints.

A model is declared as a set of states (some absorbing), a list of directed
transitions each carrying a baseline hazard family and covariate effects,
and copy/zero constraints tying coefficients together or pinning them to
zero.  ``build_parameter_layout`` turns the declaration into a bidirectional
mapping between the free parameter vector ``theta`` (length ``q``) and the
stacked per-transition coefficient vector (length ``n_coef``), and
``penalty_matrix`` assembles the quadratic roughness penalty on ``theta``
for spline-based transitions.

Coefficient paths (used in constraints and reports) follow the pattern
``"<from>-><to>.<name>"`` where ``<name>`` is one of ``intercept``,
``time`` (log-hazard slope), ``logshape`` (log Weibull shape),
``alpha1..alphaK`` (spline coefficients), or a covariate name.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ModelConfigError

ROLE_INTERCEPT = "intercept"
ROLE_TIME = "time"
ROLE_LOGSHAPE = "logshape"
ROLE_SPLINE = "alpha"
ROLE_COVARIATE = "covariate"

DEFAULT_SPLINE_DEGREE = 3
DEFAULT_PENALTY_ORDER = 2


@dataclass(frozen=True)
class Exponential:
    """Constant baseline rate exp(intercept); ignores time."""

    name = "exponential"

    def baseline_coefs(self):
        return [("intercept", ROLE_INTERCEPT)]


@dataclass(frozen=True)
class Gompertz:
    """Baseline rate exp(intercept + time * t): log-linear in time."""

    name = "gompertz"

    def baseline_coefs(self):
        return [("intercept", ROLE_INTERCEPT), ("time", ROLE_TIME)]


@dataclass(frozen=True)
class Weibull:
    """Baseline rate exp(intercept) * shape * t^(shape - 1).

    The positive scale and shape are stored on the log scale (``intercept``
    and ``logshape``) so that the free parameters are unconstrained.
    """

    name = "weibull"

    def baseline_coefs(self):
        return [("intercept", ROLE_INTERCEPT), ("logshape", ROLE_LOGSHAPE)]


@dataclass(frozen=True)
class PSpline:
    """Baseline rate exp(sum_k alpha_k B_k(t)) on a B-spline basis.

    ``n_basis`` counts basis functions, ``degree`` is the polynomial degree
    and ``penalty_order`` the order of the finite-difference roughness
    penalty on adjacent coefficients.
    """

    n_basis: int
    degree: int = DEFAULT_SPLINE_DEGREE
    penalty_order: int = DEFAULT_PENALTY_ORDER

    name = "pspline"

    def __post_init__(self):
        if self.degree < 1:
            raise ModelConfigError("pspline degree must be >= 1")
        if self.penalty_order < 1:
            raise ModelConfigError("pspline penalty_order must be >= 1")
        if self.n_basis < self.penalty_order + 1:
            raise ModelConfigError(
                f"pspline needs n_basis >= penalty_order + 1, got "
                f"n_basis={self.n_basis}, penalty_order={self.penalty_order}"
            )
        if self.n_basis < self.degree + 2:
            raise ModelConfigError(
                f"pspline needs n_basis >= degree + 2 for an interior knot "
                f"grid, got n_basis={self.n_basis}, degree={self.degree}"
            )

    def baseline_coefs(self):
        return [(f"alpha{k + 1}", ROLE_SPLINE) for k in range(self.n_basis)]


HAZARD_FAMILIES = {
    "exponential": Exponential,
    "gompertz": Gompertz,
    "weibull": Weibull,
    "pspline": PSpline,
}


@dataclass(frozen=True)
class StateSpace:
    """Finite state space 1..n_states with a set of absorbing states."""

    n_states: int
    absorbing: frozenset[int]

    def __post_init__(self):
        if self.n_states < 2:
            raise ModelConfigError("need at least 2 states")
        object.__setattr__(self, "absorbing", frozenset(self.absorbing))
        bad = [s for s in self.absorbing if not 1 <= s <= self.n_states]
        if bad:
            raise ModelConfigError(f"absorbing states outside 1..{self.n_states}: {bad}")

    @property
    def living(self) -> tuple[int, ...]:
        return tuple(s for s in range(1, self.n_states + 1) if s not in self.absorbing)


@dataclass(frozen=True)
class Transition:
    """One directed transition with its baseline family and covariates."""

    source: int
    target: int
    family: Exponential | Gompertz | Weibull | PSpline
    covariates: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.source == self.target:
            raise ModelConfigError(f"self-transition {self.source}->{self.target}")
        if len(set(self.covariates)) != len(self.covariates):
            raise ModelConfigError(
                f"duplicate covariates on {self.source}->{self.target}"
            )

    @property
    def edge(self) -> tuple[int, int]:
        return (self.source, self.target)

    def coef_names(self) -> list[str]:
        return [n for n, _ in self.family.baseline_coefs()] + list(self.covariates)

    def coef_roles(self) -> list[str]:
        return [r for _, r in self.family.baseline_coefs()] + [
            ROLE_COVARIATE for _ in self.covariates
        ]


@dataclass(frozen=True)
class Constraint:
    """Copy ("equal") or pin-to-zero ("zero") constraint on coefficient paths."""

    kind: str
    targets: tuple[str, ...]
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.kind not in ("equal", "zero"):
            raise ModelConfigError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "equal" and len(self.targets) < 2:
            raise ModelConfigError("equality constraint needs >= 2 targets")
        if not self.targets:
            raise ModelConfigError("constraint with no targets")


@dataclass(frozen=True)
class ModelSpec:
    """Validated declaration of a multi-state hazard model."""

    states: StateSpace
    transitions: tuple[Transition, ...]
    constraints: tuple[Constraint, ...] = ()
    lambda_log10_grids: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        seen = set()
        for tr in self.transitions:
            for s in tr.edge:
                if not 1 <= s <= self.states.n_states:
                    raise ModelConfigError(f"transition {tr.edge} outside state space")
            if tr.source in self.states.absorbing:
                raise ModelConfigError(
                    f"transition {tr.source}->{tr.target} leaves absorbing state"
                )
            if tr.edge in seen:
                raise ModelConfigError(f"duplicate transition {tr.source}->{tr.target}")
            seen.add(tr.edge)
        if not self.transitions:
            raise ModelConfigError("model has no transitions")

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [tr.edge for tr in self.transitions]

    @property
    def covariate_names(self) -> list[str]:
        names: list[str] = []
        for tr in self.transitions:
            for c in tr.covariates:
                if c not in names:
                    names.append(c)
        return names

    def spline_transitions(self) -> list[int]:
        """Indices of transitions with a spline baseline, in declaration order."""
        return [i for i, tr in enumerate(self.transitions) if isinstance(tr.family, PSpline)]


def coef_path(edge: tuple[int, int], coef: str) -> str:
    return f"{edge[0]}->{edge[1]}.{coef}"


@dataclass(frozen=True)
class ParameterLayout:
    """Mapping between free parameters and stacked transition coefficients.

    ``coef_to_theta[i]`` holds the free-parameter slot feeding coefficient
    ``i``, or -1 when the coefficient is pinned to zero.
    """

    coef_names: tuple[str, ...]
    coef_roles: tuple[str, ...]
    coef_to_theta: np.ndarray
    theta_names: tuple[str, ...]
    theta_roles: tuple[str, ...]
    theta_to_coef: np.ndarray  # first coefficient slot backing each theta entry
    transition_slices: tuple[slice, ...]

    @property
    def n_free(self) -> int:
        return len(self.theta_names)

    @property
    def n_coef(self) -> int:
        return len(self.coef_names)

    def expand(self, theta: np.ndarray) -> np.ndarray:
        """Map free parameters to the stacked coefficient vector."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_free,):
            raise ModelConfigError(
                f"expected theta of length {self.n_free}, got shape {theta.shape}"
            )
        out = np.zeros(self.n_coef)
        live = self.coef_to_theta >= 0
        out[live] = theta[self.coef_to_theta[live]]
        return out

    def collapse(self, coefs: np.ndarray) -> np.ndarray:
        """Read free parameters back off a stacked coefficient vector."""
        coefs = np.asarray(coefs, dtype=float)
        if coefs.shape != (self.n_coef,):
            raise ModelConfigError(
                f"expected coefficient vector of length {self.n_coef}, got "
                f"shape {coefs.shape}"
            )
        return coefs[self.theta_to_coef]

    def lift_gradient(self, coef_grad: np.ndarray) -> np.ndarray:
        """Chain rule: gradient w.r.t. coefficients -> gradient w.r.t. theta.

        Works on the trailing axis being the coefficient axis.
        """
        coef_grad = np.asarray(coef_grad, dtype=float)
        out = np.zeros(coef_grad.shape[:-1] + (self.n_free,))
        live = self.coef_to_theta >= 0
        np.add.at(out.T, self.coef_to_theta[live], coef_grad.T[live])
        return out

    def design_matrix(self) -> np.ndarray:
        """The 0/1 matrix T with coefs = T @ theta."""
        T = np.zeros((self.n_coef, self.n_free))
        live = self.coef_to_theta >= 0
        T[np.nonzero(live)[0], self.coef_to_theta[live]] = 1.0
        return T


def build_parameter_layout(spec: ModelSpec) -> ParameterLayout:
    """Index every transition coefficient and resolve constraints.

    Raises ``ModelConfigError`` for constraints naming unknown coefficients,
    overlapping constraint groups, or equality ties between coefficients of
    incompatible roles (a spline coefficient to a Weibull shape, say).
    """
    coef_names: list[str] = []
    coef_roles: list[str] = []
    slices: list[slice] = []
    for tr in spec.transitions:
        start = len(coef_names)
        coef_names.extend(coef_path(tr.edge, c) for c in tr.coef_names())
        coef_roles.extend(tr.coef_roles())
        slices.append(slice(start, len(coef_names)))
    index = {name: i for i, name in enumerate(coef_names)}

    zeroed: set[int] = set()
    groups: list[tuple[list[int], str]] = []
    claimed: dict[int, str] = {}
    for con in spec.constraints:
        ids = []
        for path in con.targets:
            if path not in index:
                raise ModelConfigError(
                    f"constraint targets unknown coefficient {path!r}; known "
                    f"coefficients look like {coef_names[0]!r}"
                )
            ids.append(index[path])
        for i in ids:
            if i in claimed:
                raise ModelConfigError(
                    f"coefficient {coef_names[i]!r} appears in more than one "
                    f"constraint"
                )
            claimed[i] = con.kind
        if con.kind == "zero":
            zeroed.update(ids)
        else:
            roles = {coef_roles[i] for i in ids}
            if len(roles) > 1:
                raise ModelConfigError(
                    f"equality constraint ties incompatible roles {sorted(roles)}: "
                    f"{[coef_names[i] for i in ids]}"
                )
            groups.append((ids, con.name or coef_names[ids[0]]))

    group_of: dict[int, int] = {}
    for g, (ids, _) in enumerate(groups):
        for i in ids:
            group_of[i] = g

    coef_to_theta = np.full(len(coef_names), -1, dtype=np.int64)
    theta_names: list[str] = []
    theta_roles: list[str] = []
    theta_to_coef: list[int] = []
    group_slot: dict[int, int] = {}
    for i in range(len(coef_names)):
        if i in zeroed:
            continue
        g = group_of.get(i)
        if g is not None and g in group_slot:
            coef_to_theta[i] = group_slot[g]
            continue
        slot = len(theta_names)
        if g is not None:
            theta_names.append(groups[g][1])
            group_slot[g] = slot
        else:
            theta_names.append(coef_names[i])
        theta_roles.append(coef_roles[i])
        theta_to_coef.append(i)
        coef_to_theta[i] = slot

    if not theta_names:
        raise ModelConfigError("all coefficients are pinned to zero")
    return ParameterLayout(
        coef_names=tuple(coef_names),
        coef_roles=tuple(coef_roles),
        coef_to_theta=coef_to_theta,
        theta_names=tuple(theta_names),
        theta_roles=tuple(theta_roles),
        theta_to_coef=np.asarray(theta_to_coef, dtype=np.int64),
        transition_slices=tuple(slices),
    )


def difference_matrix(n_basis: int, order: int) -> np.ndarray:
    """Finite-difference operator of the given order, shape (n_basis-order, n_basis)."""
    if n_basis <= order:
        raise ModelConfigError(
            f"difference order {order} needs more than {order} coefficients"
        )
    return np.diff(np.eye(n_basis), n=order, axis=0)


@dataclass(frozen=True)
class PenaltySpec:
    """Per-spline-block difference penalties, assembled on theta coordinates."""

    spec: ModelSpec
    layout: ParameterLayout

    @property
    def n_blocks(self) -> int:
        return len(self.spec.spline_transitions())

    def block_difference_matrices(self) -> list[np.ndarray]:
        mats = []
        for i in self.spec.spline_transitions():
            fam = self.spec.transitions[i].family
            mats.append(difference_matrix(fam.n_basis, fam.penalty_order))
        return mats

    def matrix(self, lambdas) -> np.ndarray:
        """Penalty matrix J(lambda) on theta coordinates, q x q, symmetric PSD.

        Blocks are lambda_j * D_j' D_j on the spline coefficients of block j;
        all other rows and columns are zero.  Constraint ties are respected by
        assembling on the coefficient scale and projecting through the
        copy/zero design.
        """
        lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
        blocks = self.spec.spline_transitions()
        if lambdas.shape != (len(blocks),):
            raise ModelConfigError(
                f"need {len(blocks)} smoothing parameters, got {lambdas.shape}"
            )
        if np.any(lambdas < 0):
            raise ModelConfigError("smoothing parameters must be >= 0")
        J_coef = np.zeros((self.layout.n_coef, self.layout.n_coef))
        for lam, i, D in zip(lambdas, blocks, self.block_difference_matrices()):
            fam = self.spec.transitions[i].family
            sl = self.layout.transition_slices[i]
            block = slice(sl.start, sl.start + fam.n_basis)
            J_coef[block, block] += lam * (D.T @ D)
        T = self.layout.design_matrix()
        J = T.T @ J_coef @ T
        return (J + J.T) / 2.0


def penalty_matrix(spec: ModelSpec, layout: ParameterLayout, lambdas) -> np.ndarray:
    """Convenience wrapper building J(lambda) straight from a spec."""
    return PenaltySpec(spec, layout).matrix(lambdas)


def _family_from_config(entry: dict) -> Exponential | Gompertz | Weibull | PSpline:
    kind = entry.get("baseline", "exponential")
    if not isinstance(kind, str) or kind not in HAZARD_FAMILIES:
        raise ModelConfigError(
            f"unknown baseline {kind!r}; pick one of {sorted(HAZARD_FAMILIES)}"
        )
    if kind == "pspline":
        if "K" not in entry:
            raise ModelConfigError("pspline baseline needs K (number of basis functions)")
        return PSpline(
            n_basis=int(entry["K"]),
            degree=int(entry.get("degree", DEFAULT_SPLINE_DEGREE)),
            penalty_order=int(entry.get("penalty_order", DEFAULT_PENALTY_ORDER)),
        )
    return HAZARD_FAMILIES[kind]()


def spec_from_config(config: dict) -> ModelSpec:
    """Build a validated ModelSpec from a configuration mapping.

    Expected keys: ``states`` (int), ``absorbing`` (list of ints),
    ``transitions`` (list of {from, to, baseline, K, degree, penalty_order,
    covariates}), optional ``constraints`` (list of {type, targets, name})
    and optional ``lambda_grid`` (list of per-spline-block log10 grids).
    """
    try:
        n_states = int(config["states"])
        absorbing = frozenset(int(s) for s in config.get("absorbing", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelConfigError(f"bad states/absorbing section: {exc}") from exc
    transitions = []
    for entry in config.get("transitions", []):
        try:
            transitions.append(
                Transition(
                    source=int(entry["from"]),
                    target=int(entry["to"]),
                    family=_family_from_config(entry),
                    covariates=tuple(entry.get("covariates", [])),
                )
            )
        except KeyError as exc:
            raise ModelConfigError(f"transition entry missing key {exc}") from exc
    constraints = []
    for entry in config.get("constraints", []):
        try:
            constraints.append(
                Constraint(
                    kind=entry["type"],
                    targets=tuple(entry["targets"]),
                    name=entry.get("name"),
                )
            )
        except KeyError as exc:
            raise ModelConfigError(f"constraint entry missing key {exc}") from exc
    grids = config.get("lambda_grid")
    if grids is not None:
        grids = tuple(tuple(float(g) for g in block) for block in grids)
    return ModelSpec(
        states=StateSpace(n_states=n_states, absorbing=absorbing),
        transitions=tuple(transitions),
        constraints=tuple(constraints),
        lambda_log10_grids=grids,
    )


def spec_to_config(spec: ModelSpec) -> dict:
    """Inverse of ``spec_from_config`` (round-trips through JSON)."""
    transitions = []
    for tr in spec.transitions:
        entry = {"from": tr.source, "to": tr.target, "baseline": tr.family.name}
        if isinstance(tr.family, PSpline):
            entry["K"] = tr.family.n_basis
            entry["degree"] = tr.family.degree
            entry["penalty_order"] = tr.family.penalty_order
        if tr.covariates:
            entry["covariates"] = list(tr.covariates)
        transitions.append(entry)
    config = {
        "states": spec.states.n_states,
        "absorbing": sorted(spec.states.absorbing),
        "transitions": transitions,
    }
    if spec.constraints:
        config["constraints"] = [
            {"type": c.kind, "targets": list(c.targets)}
            | ({"name": c.name} if c.name else {})
            for c in spec.constraints
        ]
    if spec.lambda_log10_grids is not None:
        config["lambda_grid"] = [list(b) for b in spec.lambda_log10_grids]
    return config


def load_spec(path) -> ModelSpec:
    with open(path) as fh:
        return spec_from_config(json.load(fh))
