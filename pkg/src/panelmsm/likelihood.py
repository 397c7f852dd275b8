"""Panel data containers and the interval-censored likelihood machinery.

Subjects are observed at irregular visit times; between visits only the
states at the endpoints are known.  Each consecutive pair of visits
contributes one likelihood term: a transition probability for an observed
arrival state, a sum over living states when follow-up ends without status,
and a probability-times-hazard density when the time of death is recorded
exactly.  The module returns the log likelihood together with its score
vector and an outer-product information estimate accumulated over interval
terms, which is what the fitting routine consumes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataValidationError, NumericalError
from .hazards import Model
from .markov import (
    GridPolicy,
    _absorbing_indices,
    build_generator,
    build_generators,
    build_generators_with_grads,
    grid_cells,
    interval_matrices,
    transition_matrices,
)
from .modelspec import StateSpace

RIGHT_CENSORED = -1

KIND_INTERIOR = 0
KIND_CENSORED = 1
KIND_DEATH = 2

# Any interval probability at or below this triggers a hard error rather
# than silently driving the log likelihood to -inf.
PROB_FLOOR = 1e-300

_RESERVED_COLUMNS = ("id", "time", "state", "death")


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Row-per-visit panel, sorted by subject then time.

    ``states`` uses positive state codes with ``RIGHT_CENSORED`` marking a
    final visit where the subject was alive but the state went unrecorded;
    ``death`` is 1 on a final row whose time is an exactly observed death.
    ``offsets`` delimits subjects: subject i owns rows
    offsets[i]:offsets[i+1].
    """

    ids: np.ndarray
    times: np.ndarray
    states: np.ndarray
    death: np.ndarray
    covariate_names: tuple[str, ...]
    covariates: np.ndarray
    offsets: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.times.shape[0]

    @property
    def n_subjects(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def subject_ids(self) -> np.ndarray:
        return self.ids[self.offsets[:-1]]

    def subject_slice(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    @property
    def first_rows(self) -> np.ndarray:
        return self.offsets[:-1]

    @property
    def final_rows(self) -> np.ndarray:
        return self.offsets[1:] - 1

    def time_range(self) -> tuple[float, float]:
        return (float(self.times.min()), float(self.times.max()))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {"id": self.ids, "time": self.times, "state": self.states, "death": self.death}
        )
        for j, name in enumerate(self.covariate_names):
            frame[name] = self.covariates[:, j]
        return frame


def dataset_from_frame(frame: pd.DataFrame) -> PanelDataset:
    """Build a PanelDataset from a dataframe with id/time/state columns.

    Rows are stably sorted by subject (in order of first appearance) and
    time; every column beyond the reserved ones is kept as a numeric
    covariate.  Structural problems raise ``DataValidationError``.
    """
    for col in ("id", "time", "state"):
        if col not in frame.columns:
            raise DataValidationError(f"panel data is missing required column {col!r}")
    codes, uniques = pd.factorize(frame["id"], use_na_sentinel=False)
    times = np.asarray(frame["time"], dtype=float)
    if not np.all(np.isfinite(times)):
        bad = int(np.nonzero(~np.isfinite(times))[0][0])
        raise DataValidationError(
            "non-finite visit time", subject_id=frame["id"].iloc[bad], row=bad
        )
    states_raw = np.asarray(frame["state"], dtype=float)
    if not np.all(np.isfinite(states_raw)) or np.any(states_raw != np.round(states_raw)):
        bad = int(
            np.nonzero(~np.isfinite(states_raw) | (states_raw != np.round(states_raw)))[0][0]
        )
        raise DataValidationError(
            f"state codes must be integers, found {frame['state'].iloc[bad]!r}",
            subject_id=frame["id"].iloc[bad],
            row=bad,
        )
    states = states_raw.astype(np.int64)
    if "death" in frame.columns:
        death_raw = np.asarray(frame["death"], dtype=float)
        if np.any(~np.isin(death_raw, (0.0, 1.0))):
            bad = int(np.nonzero(~np.isin(death_raw, (0.0, 1.0)))[0][0])
            raise DataValidationError(
                f"death flags must be 0 or 1, found {frame['death'].iloc[bad]!r}",
                subject_id=frame["id"].iloc[bad],
                row=bad,
            )
        death = death_raw.astype(np.int64)
    else:
        death = np.zeros(len(frame), dtype=np.int64)
    cov_names = tuple(c for c in frame.columns if c not in _RESERVED_COLUMNS)
    covariates = np.empty((len(frame), len(cov_names)))
    for j, name in enumerate(cov_names):
        col = np.asarray(frame[name], dtype=float)
        if not np.all(np.isfinite(col)):
            bad = int(np.nonzero(~np.isfinite(col))[0][0])
            raise DataValidationError(
                f"covariate {name!r} has a missing or non-finite value",
                subject_id=frame["id"].iloc[bad],
                row=bad,
            )
        covariates[:, j] = col

    order = np.lexsort((times, codes))
    ids = np.asarray(frame["id"])[order]
    codes = codes[order]
    boundaries = np.nonzero(np.diff(codes))[0] + 1
    offsets = np.concatenate(([0], boundaries, [len(codes)]))
    return PanelDataset(
        ids=ids,
        times=times[order],
        states=states[order],
        death=death[order],
        covariate_names=cov_names,
        covariates=covariates[order],
        offsets=offsets.astype(np.int64),
    )


def load_panel(path) -> PanelDataset:
    """Read a visit-per-row CSV into a PanelDataset."""
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataValidationError(f"could not parse panel CSV: {exc}") from exc
    return dataset_from_frame(frame)


def save_panel(data: PanelDataset, path) -> None:
    data.to_frame().to_csv(path, index=False)


def validate_panel(data: PanelDataset, states: StateSpace) -> None:
    """Check state codes and sequencing against a state space.

    Enforces: at least two visits per subject, strictly increasing times,
    state codes in range, right-censoring and death flags only on final
    rows, death flags only on absorbing states, and no departures from
    absorbing states.
    """
    n = states.n_states
    absorbing = states.absorbing
    for i in range(data.n_subjects):
        sl = data.subject_slice(i)
        sid = data.ids[sl.start]
        t = data.times[sl]
        y = data.states[sl]
        d = data.death[sl]
        if sl.stop - sl.start < 2:
            raise DataValidationError(
                "subject has a single visit; panel likelihood needs at least two",
                subject_id=sid,
                row=sl.start,
            )
        if np.any(np.diff(t) <= 0):
            bad = sl.start + int(np.nonzero(np.diff(t) <= 0)[0][0]) + 1
            raise DataValidationError(
                "visit times must be strictly increasing within a subject",
                subject_id=sid,
                row=bad,
            )
        ok = ((y >= 1) & (y <= n)) | (y == RIGHT_CENSORED)
        if not np.all(ok):
            bad = sl.start + int(np.nonzero(~ok)[0][0])
            raise DataValidationError(
                f"state code {data.states[bad]} outside 1..{n}",
                subject_id=sid,
                row=bad,
            )
        if np.any(y[:-1] == RIGHT_CENSORED):
            bad = sl.start + int(np.nonzero(y[:-1] == RIGHT_CENSORED)[0][0])
            raise DataValidationError(
                "right-censoring marker allowed only on a subject's final row",
                subject_id=sid,
                row=bad,
            )
        interior_absorbing = np.isin(y[:-1], list(absorbing))
        if np.any(interior_absorbing):
            bad = sl.start + int(np.nonzero(interior_absorbing)[0][0])
            raise DataValidationError(
                f"absorbing state {data.states[bad]} on a non-final row; nothing "
                "leaves an absorbing state",
                subject_id=sid,
                row=bad,
            )
        if np.any(d[:-1] == 1):
            bad = sl.start + int(np.nonzero(d[:-1] == 1)[0][0])
            raise DataValidationError(
                "death flag allowed only on a subject's final row",
                subject_id=sid,
                row=bad,
            )
        if d[-1] == 1 and y[-1] not in absorbing:
            raise DataValidationError(
                f"death flag requires an absorbing final state, got {y[-1]}",
                subject_id=sid,
                row=sl.stop - 1,
            )


def model_covariate_matrix(model: Model, data: PanelDataset) -> np.ndarray:
    """Data columns reordered to the model's covariate union, (n_rows, n_cov)."""
    need = model.spec.covariate_names
    missing = [c for c in need if c not in data.covariate_names]
    if missing:
        raise DataValidationError(
            f"panel data lacks covariate column(s) {missing} required by the model"
        )
    cols = [data.covariate_names.index(c) for c in need]
    return data.covariates[:, cols] if cols else np.zeros((data.n_rows, 0))


@dataclass(frozen=True, eq=False)
class _IntervalTable:
    """Flat view of all consecutive visit pairs across subjects."""

    sub_idx: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    frm: np.ndarray  # 0-based departure state
    to: np.ndarray  # 0-based arrival state, -1 when censored
    kind: np.ndarray
    X: np.ndarray  # covariates at the interval start, model column order


def interval_table(model: Model, data: PanelDataset) -> _IntervalTable:
    final = np.zeros(data.n_rows, dtype=bool)
    final[data.final_rows] = True
    left = np.nonzero(~final)[0]
    right = left + 1
    sub_idx = np.repeat(np.arange(data.n_subjects), data.counts - 1)
    kind = np.full(left.shape[0], KIND_INTERIOR, dtype=np.int64)
    is_last = final[right]
    kind[is_last & (data.states[right] == RIGHT_CENSORED)] = KIND_CENSORED
    kind[is_last & (data.death[right] == 1)] = KIND_DEATH
    Xmat = model_covariate_matrix(model, data)
    return _IntervalTable(
        sub_idx=sub_idx,
        t0=data.times[left],
        t1=data.times[right],
        frm=data.states[left] - 1,
        to=np.where(data.states[right] == RIGHT_CENSORED, -1, data.states[right] - 1),
        kind=kind,
        X=Xmat[left],
    )


@dataclass(frozen=True, eq=False)
class LikelihoodReport:
    """Unpenalised log likelihood with score and information estimate.

    ``information`` is the sum over interval terms of the outer product of
    per-term score contributions.
    """

    loglik: float
    score: np.ndarray
    information: np.ndarray
    subject_logliks: np.ndarray
    n_terms: int


def _term_values(table, sl, P, dP, Q, dQ, living):
    """Per-term probabilities (or densities) and their parameter gradients."""
    kind = table.kind[sl]
    frm = table.frm[sl]
    to = table.to[sl]
    m = kind.shape[0]
    rows = np.arange(m)
    with_grads = dP is not None
    val = np.empty(m)
    dval = np.empty((m, dP.shape[1])) if with_grads else None

    interior = kind == KIND_INTERIOR
    if np.any(interior):
        r = rows[interior]
        val[interior] = P[r, frm[interior], to[interior]]
        if with_grads:
            dval[interior] = dP[r, :, frm[interior], to[interior]]
    censored = kind == KIND_CENSORED
    if np.any(censored):
        r = rows[censored]
        val[censored] = P[r, frm[censored]][:, living].sum(axis=1)
        if with_grads:
            dval[censored] = dP[r, :, frm[censored]][:, :, living].sum(axis=2)
    died = kind == KIND_DEATH
    if np.any(died):
        r = rows[died]
        dstate = to[died]
        p_live = P[r, frm[died]][:, living]  # (n, L)
        q_col = Q[r, :, dstate][:, living]  # rate into the death state
        val[died] = (p_live * q_col).sum(axis=1)
        if with_grads:
            dp_live = dP[r, :, frm[died]][:, :, living]  # (n, q, L)
            dq_col = dQ[r, :, :, dstate][:, :, living]
            dval[died] = (dp_live * q_col[:, None, :]).sum(axis=2)
            dval[died] += (p_live[:, None, :] * dq_col).sum(axis=2)
    return val, dval


def _raise_on_tiny(val, table, sl, data):
    tiny = val <= PROB_FLOOR
    if not np.any(tiny):
        return
    i = int(np.nonzero(tiny)[0][0])
    term = sl.start + i
    sub = int(table.sub_idx[term])
    raise NumericalError(
        f"likelihood term vanished for subject {data.subject_ids[sub]!r} over "
        f"({table.t0[term]:g}, {table.t1[term]:g}]: the observed move "
        f"{table.frm[term] + 1} -> {int(table.to[term]) + 1 if table.to[term] >= 0 else '?'} "
        "has probability ~0 under the model",
        context={"subject": data.subject_ids[sub], "t0": float(table.t0[term]), "t1": float(table.t1[term])},
    )


def _data_grid_report(model, theta, data, with_grads, chunk=4096):
    table = interval_table(model, data)
    living = np.asarray([s - 1 for s in model.spec.states.living], dtype=np.intp)
    absorbing = _absorbing_indices(model)
    m = table.t0.shape[0]
    q = model.n_free
    ll_terms = np.empty(m)
    score = np.zeros(q)
    info = np.zeros((q, q))
    for a in range(0, m, chunk):
        sl = slice(a, min(a + chunk, m))
        dt = table.t1[sl] - table.t0[sl]
        if with_grads:
            Q, dQ = build_generators_with_grads(model, theta, table.t0[sl], table.X[sl])
            P, dP = transition_matrices(Q, dt, dQ=dQ, absorbing=absorbing)
        else:
            Q = build_generators(model, theta, table.t0[sl], table.X[sl])
            P, dP, dQ = transition_matrices(Q, dt, absorbing=absorbing), None, None
        val, dval = _term_values(table, sl, P, dP, Q, dQ, living)
        _raise_on_tiny(val, table, sl, data)
        ll_terms[sl] = np.log(val)
        if with_grads:
            u = dval / val[:, None]
            score += u.sum(axis=0)
            info += u.T @ u
    subject_ll = np.bincount(table.sub_idx, weights=ll_terms, minlength=data.n_subjects)
    return ll_terms, subject_ll, score, info, m


def subject_terms(model, theta, data, i, policy, with_grads=True, Xmat=None):
    """Interval terms for one subject via the cell-chaining route.

    Returns (log terms, per-term score contributions or None).  This is the
    reference path: it prices each interval independently, chaining grid
    cells, and is used for imposed grids and as a cross-check of the
    batched engine.
    """
    sl = data.subject_slice(i)
    t = data.times[sl]
    y = data.states[sl]
    d = data.death[sl]
    if Xmat is None:
        Xmat = model_covariate_matrix(model, data)
    Xmat = Xmat[sl]
    living = np.asarray([s - 1 for s in model.spec.states.living], dtype=np.intp)
    n = t.shape[0]
    q = model.n_free
    ll = np.empty(n - 1)
    U = np.empty((n - 1, q)) if with_grads else None
    for j in range(1, n):
        frm = y[j - 1] - 1
        x_row = Xmat[j - 1]
        out = interval_matrices(model, theta, x_row, t[j - 1], t[j], policy, with_grads)
        P, dP = out if with_grads else (out, None)
        is_final = j == n - 1
        if is_final and y[j] == RIGHT_CENSORED:
            val = P[frm, living].sum()
            dval = dP[:, frm, living].sum(axis=1) if with_grads else None
        elif is_final and d[j] == 1:
            dstate = y[j] - 1
            last_eval = grid_cells(policy, t[j - 1], t[j])[-1][2]
            Q_last, dQ_last = build_generator(model, theta, last_eval, x_row)
            q_col = Q_last[living, dstate]
            val = P[frm, living] @ q_col
            if with_grads:
                dval = dP[:, frm, living] @ q_col
                dval += dQ_last[:, living, dstate] @ P[frm, living]
        else:
            val = P[frm, y[j] - 1]
            dval = dP[:, frm, y[j] - 1] if with_grads else None
        if val <= PROB_FLOOR:
            raise NumericalError(
                f"likelihood term vanished for subject {data.ids[sl.start]!r} over "
                f"({t[j - 1]:g}, {t[j]:g}]",
                context={"subject": data.ids[sl.start], "t0": float(t[j - 1]), "t1": float(t[j])},
            )
        ll[j - 1] = np.log(val)
        if with_grads:
            U[j - 1] = dval / val
    return ll, U


def _chained_report(model, theta, data, policy, with_grads, threads=1):
    q = model.n_free
    Xmat = model_covariate_matrix(model, data)

    def one(i):
        return subject_terms(model, theta, data, i, policy, with_grads, Xmat=Xmat)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(data.n_subjects)))
    else:
        results = [one(i) for i in range(data.n_subjects)]
    subject_ll = np.asarray([r[0].sum() for r in results])
    ll_terms = np.concatenate([r[0] for r in results]) if results else np.zeros(0)
    score = np.zeros(q)
    info = np.zeros((q, q))
    if with_grads:
        U = np.concatenate([r[1] for r in results]) if results else np.zeros((0, q))
        score = U.sum(axis=0)
        info = U.T @ U
    return ll_terms, subject_ll, score, info, ll_terms.shape[0]


def dataset_report(
    model: Model,
    theta,
    data: PanelDataset,
    policy: GridPolicy | None = None,
    threads: int = 1,
) -> LikelihoodReport:
    """Log likelihood, score and information over the whole panel.

    The data-grid policy runs through a flat batched engine; imposed grids
    chain cells per interval, optionally across a thread pool.
    """
    theta = np.asarray(theta, dtype=float)
    policy = policy or GridPolicy()
    if policy.kind == "data":
        ll_terms, subject_ll, score, info, m = _data_grid_report(model, theta, data, True)
    else:
        ll_terms, subject_ll, score, info, m = _chained_report(
            model, theta, data, policy, True, threads=threads
        )
    return LikelihoodReport(
        loglik=float(ll_terms.sum()),
        score=score,
        information=info,
        subject_logliks=subject_ll,
        n_terms=m,
    )


def dataset_loglik(
    model: Model,
    theta,
    data: PanelDataset,
    policy: GridPolicy | None = None,
) -> tuple[float, np.ndarray]:
    """Log likelihood only, skipping all derivative work."""
    theta = np.asarray(theta, dtype=float)
    policy = policy or GridPolicy()
    if policy.kind == "data":
        ll_terms, subject_ll, _, _, _ = _data_grid_report(model, theta, data, False)
    else:
        ll_terms, subject_ll, _, _, _ = _chained_report(model, theta, data, policy, False)
    return float(ll_terms.sum()), subject_ll
