"""Generator matrices and interval transition probabilities with derivatives.

Hazards are treated as step functions of time: constant within each grid
cell, evaluated at the cell's left endpoint.  On a cell the process is
time-homogeneous, so the cell's transition probability matrix is the matrix
exponential of elapsed time times the generator.  The default route is an
eigendecomposition of the generator, which gives the exponential and every
coefficient derivative in one sweep; rows where the decomposition is
untrustworthy (nearly defective generators, complex residue, negative
probabilities) fall back to a Pade exponential with complex-step
directional derivatives.  Multi-cell intervals are chained by matrix
products with the product rule for derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import ModelConfigError, NumericalError
from .hazards import Model

# Eigenvalue gap below which the divided difference switches to its limit
# form; relative to the larger eigenvalue magnitude.
EIG_TIE_RTOL = 1e-7
# Eigenvector condition number beyond which the decomposition is treated as
# defective.
EIG_COND_MAX = 1e12
# Relative Frobenius reconstruction error V diag(b) V^-1 vs Q that flags a
# bad decomposition.
EIG_RECON_RTOL = 1e-8
# Imaginary residue allowed on probabilities / derivatives before a row is
# recomputed by the fallback route.
P_IMAG_TOL = 1e-10
DP_IMAG_TOL = 1e-8
# Probabilities may undershoot zero by at most this much before the row is
# considered broken.
P_NEG_TOL = 1e-12
# Allowed drift of row sums away from one.
P_ROWSUM_TOL = 1e-8
# Step size for complex-step directional derivatives in the fallback.
COMPLEX_STEP = 1e-20
# Relative tolerance for snapping interval endpoints onto grid points.
GRID_SNAP = 1e-9


@dataclass(frozen=True)
class GridPolicy:
    """How observation intervals are cut into constant-hazard cells.

    ``data``: one cell per interval, hazard frozen at the interval start.
    ``imposed``: a global grid ``anchor + j * step`` cuts every interval;
    the hazard on a cell comes from the grid point at its left end.
    """

    kind: str = "data"
    step: float = 0.5
    anchor: float = 0.0

    def __post_init__(self):
        if self.kind not in ("data", "imposed"):
            raise ModelConfigError(f"grid kind must be 'data' or 'imposed', got {self.kind!r}")
        if not self.step > 0:
            raise ModelConfigError(f"grid step must be positive, got {self.step}")

    def floor_time(self, t: float) -> float:
        """Largest hazard evaluation time the policy can produce for times >= t.

        Useful when sizing spline bases: imposed-grid cells evaluate the
        hazard at grid points that may sit below the earliest visit time.
        """
        if self.kind == "data":
            return float(t)
        r = (t - self.anchor) / self.step
        return self.anchor + math.floor(r + GRID_SNAP) * self.step


def grid_cells(policy: GridPolicy, t0: float, t1: float) -> list[tuple[float, float, float]]:
    """Cut (t0, t1] into cells, returning (start, end, hazard_time) triples.

    ``hazard_time`` is where the hazard is evaluated for that cell.  Under
    the data policy this is ``t0``; under an imposed grid it is the grid
    point at or below the cell start, so results do not depend on where
    visits happen to fall.
    """
    if t1 < t0:
        raise ValueError(f"interval runs backwards: ({t0}, {t1})")
    if policy.kind == "data" or t1 == t0:
        return [(t0, t1, t0)]
    h = policy.step
    r0 = (t0 - policy.anchor) / h
    r1 = (t1 - policy.anchor) / h
    j0 = math.floor(r0 + GRID_SNAP)
    j_last = math.ceil(r1 - GRID_SNAP) - 1  # left index of the cell holding t1
    bounds = [t0]
    bounds.extend(policy.anchor + j * h for j in range(j0 + 1, j_last + 1))
    bounds.append(t1)
    evals = [policy.anchor + j * h for j in range(j0, j_last + 1)]
    return [(bounds[i], bounds[i + 1], evals[i]) for i in range(len(evals))]


def _absorbing_indices(model: Model) -> np.ndarray:
    return np.asarray(sorted(model.spec.states.absorbing), dtype=np.intp) - 1


def _covariate_columns(model: Model) -> list[np.ndarray]:
    index = {name: i for i, name in enumerate(model.spec.covariate_names)}
    return [
        np.asarray([index[c] for c in tr.covariates], dtype=np.intp)
        for tr in model.spec.transitions
    ]


def _check_covariates(model: Model, times: np.ndarray, X: np.ndarray):
    n_cov = len(model.spec.covariate_names)
    if X.shape != (times.shape[0], n_cov):
        raise ModelConfigError(
            f"covariate array must be (n_rows, {n_cov}) matching "
            f"{model.spec.covariate_names}, got {X.shape}"
        )


def build_generators(model: Model, theta, times, X) -> np.ndarray:
    """Stack of generator matrices, one per (time, covariate) row.

    Off-diagonal entries are the transition rates; each diagonal entry is
    minus its row's off-diagonal sum, so rows sum to zero and rows of
    states without outgoing transitions are zero.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    X = np.asarray(X, dtype=float)
    _check_covariates(model, times, X)
    coefs = model.layout.expand(np.asarray(theta, dtype=float))
    m, D = times.shape[0], model.n_states
    Q = np.zeros((m, D, D))
    cols = _covariate_columns(model)
    for i, hz in enumerate(model.hazards):
        r, s = hz.transition.source - 1, hz.transition.target - 1
        rate = hz.rate(times, X[:, cols[i]], coefs[hz.coef_slice])
        Q[:, r, s] = rate
        Q[:, r, r] -= rate
    return Q


def build_generators_with_grads(model: Model, theta, times, X) -> tuple[np.ndarray, np.ndarray]:
    """Generators plus their derivatives in the free parameters.

    Returns ``(Q, dQ)`` with shapes (m, D, D) and (m, q, D, D).  Derivative
    slots follow the free-parameter layout; coefficients tied by equality
    constraints accumulate into the shared slot and pinned coefficients
    contribute nothing.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    X = np.asarray(X, dtype=float)
    _check_covariates(model, times, X)
    layout = model.layout
    coefs = layout.expand(np.asarray(theta, dtype=float))
    m, D, q = times.shape[0], model.n_states, model.n_free
    Q = np.zeros((m, D, D))
    dQ = np.zeros((m, q, D, D))
    cols = _covariate_columns(model)
    for i, hz in enumerate(model.hazards):
        r, s = hz.transition.source - 1, hz.transition.target - 1
        sl = hz.coef_slice
        rate, grad = hz.rate_and_grad(times, X[:, cols[i]], coefs[sl])
        Q[:, r, s] = rate
        Q[:, r, r] -= rate
        for j, slot in enumerate(layout.coef_to_theta[sl]):
            if slot < 0:
                continue
            dQ[:, slot, r, s] += grad[:, j]
            dQ[:, slot, r, r] -= grad[:, j]
    return Q, dQ


def build_generator(model: Model, theta, t: float, x) -> tuple[np.ndarray, np.ndarray]:
    """Single generator and derivative stack at one time and covariate row."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    Q, dQ = build_generators_with_grads(model, theta, [float(t)], x[None, :])
    return Q[0], dQ[0]


def _divided_differences(vals: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """First divided differences of exp(dt * b) over eigenvalue pairs.

    Entry (l, m) is (e^{dt b_l} - e^{dt b_m}) / (b_l - b_m), switching to
    the limit dt * e^{dt (b_l + b_m) / 2} when the eigenvalues nearly tie;
    the diagonal is covered by the tie branch.
    """
    E = np.exp(vals * dt[:, None])
    b_l = vals[:, :, None]
    b_m = vals[:, None, :]
    diff = b_l - b_m
    scale = np.maximum(1.0, np.maximum(np.abs(b_l), np.abs(b_m)))
    tie = np.abs(diff) < EIG_TIE_RTOL * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        W = (E[:, :, None] - E[:, None, :]) / np.where(tie, 1.0, diff)
    limit = dt[:, None, None] * np.exp(0.5 * (b_l + b_m) * dt[:, None, None])
    return np.where(tie, limit, W)


def _expm_fallback(Q: np.ndarray, dt: float, dQ: np.ndarray | None):
    """Pade exponential with complex-step directional derivatives.

    The derivative of the exponential in direction dQ_k is recovered from
    the imaginary part of expm(dt (Q + i h dQ_k)); the step h is far below
    working precision so there is no subtractive cancellation.
    """
    P = expm(Q * dt)
    if dQ is None:
        return P, None
    dP = np.zeros_like(dQ)
    for k in range(dQ.shape[0]):
        if not dQ[k].any():
            continue
        dP[k] = expm((Q + 1j * COMPLEX_STEP * dQ[k]) * dt).imag / COMPLEX_STEP
    return P, dP


def transition_matrices(
    Q: np.ndarray,
    dt: np.ndarray,
    dQ: np.ndarray | None = None,
    absorbing: np.ndarray | None = None,
):
    """Matrix exponentials expm(dt Q) for a stack of generators.

    With ``dQ`` also returns the stack of derivatives, shape (m, q, D, D).
    Rows where the eigendecomposition route fails its diagnostics are
    recomputed by the fallback; if probabilities still come out negative or
    rows do not sum to one, ``NumericalError`` is raised naming the rows.
    """
    Q = np.asarray(Q, dtype=float)
    dt = np.atleast_1d(np.asarray(dt, dtype=float))
    m, D = Q.shape[0], Q.shape[-1]
    if np.any(dt < 0):
        raise ValueError("negative interval length")
    with_grads = dQ is not None
    if m == 0:
        empty_dP = np.zeros((0,) + (dQ.shape[1], D, D)) if with_grads else None
        return (Q.copy(), empty_dP) if with_grads else Q.copy()
    q = dQ.shape[1] if with_grads else 0

    P = np.full((m, D, D), np.nan)
    dP = np.zeros((m, q, D, D)) if with_grads else None
    bad = np.zeros(m, dtype=bool)
    try:
        vals, vecs = np.linalg.eig(Q)
        vals = vals.astype(complex)
        vecs = vecs.astype(complex)
        try:
            vecs_inv = np.linalg.inv(vecs)
        except np.linalg.LinAlgError:
            vecs_inv = np.empty_like(vecs)
            for i in range(m):
                try:
                    vecs_inv[i] = np.linalg.inv(vecs[i])
                except np.linalg.LinAlgError:
                    vecs_inv[i] = np.eye(D)
                    bad[i] = True
        recon = vecs @ (vals[:, :, None] * vecs_inv)
        q_norm = np.linalg.norm(Q, axis=(1, 2))
        resid = np.linalg.norm(recon.real - Q, axis=(1, 2)) / np.maximum(1.0, q_norm)
        resid += np.linalg.norm(recon.imag, axis=(1, 2)) / np.maximum(1.0, q_norm)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            cond = np.linalg.cond(vecs)
        bad |= resid > EIG_RECON_RTOL
        bad |= ~np.isfinite(cond) | (cond > EIG_COND_MAX)

        E = np.exp(vals * dt[:, None])
        P_c = (vecs * E[:, None, :]) @ vecs_inv
        bad |= np.abs(P_c.imag).max(axis=(1, 2)) > P_IMAG_TOL
        P = P_c.real.copy()
        if with_grads:
            W = _divided_differences(vals, dt)
            inner = (vecs_inv[:, None] @ dQ @ vecs[:, None]) * W[:, None]
            dP_c = vecs[:, None] @ inner @ vecs_inv[:, None]
            bad |= np.abs(dP_c.imag).max(axis=(1, 2, 3)) > DP_IMAG_TOL
            dP = dP_c.real.copy()
    except np.linalg.LinAlgError:
        bad[:] = True

    zero_dt = dt == 0.0
    if np.any(zero_dt):
        P[zero_dt] = np.eye(D)
        if with_grads:
            dP[zero_dt] = 0.0
        bad &= ~zero_dt

    bad |= ~np.isfinite(P).all(axis=(1, 2))
    bad |= P.min(axis=(1, 2)) < -P_NEG_TOL
    bad |= np.abs(P.sum(axis=2) - 1.0).max(axis=1) > P_ROWSUM_TOL
    if with_grads:
        bad |= ~np.isfinite(dP).all(axis=(1, 2, 3))

    for i in np.nonzero(bad)[0]:
        P[i], dP_i = _expm_fallback(Q[i], float(dt[i]), dQ[i] if with_grads else None)
        if with_grads:
            dP[i] = dP_i

    broken = np.nonzero(
        (P.min(axis=(1, 2)) < -P_NEG_TOL)
        | ~np.isfinite(P).all(axis=(1, 2))
        | (np.abs(P.sum(axis=2) - 1.0).max(axis=1) > P_ROWSUM_TOL)
    )[0]
    if broken.size:
        i = int(broken[0])
        raise NumericalError(
            f"transition probabilities failed validity checks on {broken.size} "
            f"row(s); first bad row {i} has dt={dt[i]:g} and generator norm "
            f"{np.linalg.norm(Q[i]):g}",
            context={"rows": broken.tolist(), "dt": dt[broken].tolist()},
        )
    np.clip(P, 0.0, None, out=P)
    P /= P.sum(axis=2, keepdims=True)

    if absorbing is not None and len(absorbing):
        absorbing = np.asarray(absorbing, dtype=np.intp)
        P[:, absorbing, :] = 0.0
        P[:, absorbing, absorbing] = 1.0
        if with_grads:
            dP[:, :, absorbing, :] = 0.0

    return (P, dP) if with_grads else P


def chain_matrices(P_cells: np.ndarray, dP_cells: np.ndarray | None = None):
    """Product of cell matrices in order, with product-rule derivatives."""
    c, D = P_cells.shape[0], P_cells.shape[-1]
    if c == 0:
        total = np.eye(D)
        return (total, np.zeros((dP_cells.shape[1], D, D))) if dP_cells is not None else total
    pre = np.empty_like(P_cells)
    pre[0] = P_cells[0]
    for i in range(1, c):
        pre[i] = pre[i - 1] @ P_cells[i]
    if dP_cells is None:
        return pre[-1]
    suf = np.empty_like(P_cells)
    suf[-1] = np.eye(D)
    for i in range(c - 2, -1, -1):
        suf[i] = P_cells[i + 1] @ suf[i + 1]
    d_total = np.zeros_like(dP_cells[0])
    eye = np.eye(D)
    for i in range(c):
        left = pre[i - 1] if i else eye
        d_total += left @ dP_cells[i] @ suf[i]
    return pre[-1], d_total


def interval_matrices(
    model: Model,
    theta,
    x_row,
    t0: float,
    t1: float,
    policy: GridPolicy,
    with_grads: bool = True,
):
    """Transition matrix (and derivatives) across one observation interval.

    Cuts the interval per ``policy``, exponentiates each cell's generator
    with the subject's covariates held fixed, and chains the results.
    """
    cells = grid_cells(policy, t0, t1)
    t_evals = np.asarray([cell[2] for cell in cells])
    dts = np.asarray([cell[1] - cell[0] for cell in cells])
    x_row = np.atleast_1d(np.asarray(x_row, dtype=float))
    X = np.broadcast_to(x_row, (len(cells), x_row.shape[0]))
    absorbing = _absorbing_indices(model)
    if with_grads:
        Q, dQ = build_generators_with_grads(model, theta, t_evals, X)
        P, dP = transition_matrices(Q, dts, dQ=dQ, absorbing=absorbing)
        return chain_matrices(P, dP)
    Q = build_generators(model, theta, t_evals, X)
    P = transition_matrices(Q, dts, absorbing=absorbing)
    return chain_matrices(P)
