"""Synthetic interval-censored panels from a known multi-state model.

Latent trajectories are simulated exactly for the piecewise-constant
version of the model on a fine grid: within each cell the leaving
intensity is constant, so jump times come from inverting the piecewise
linear cumulative hazard against a unit exponential draw.  Trajectories
are then observed the way a panel study would see them: states recorded at
jittered visit times, death times kept exactly, administrative censoring
at the end of follow-up.  Reproducibility is per subject: subject i draws
from a generator seeded by (seed, i) regardless of execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ModelConfigError
from .hazards import Model
from .likelihood import RIGHT_CENSORED, PanelDataset, dataset_from_frame
from .modelspec import StateSpace

DEFAULT_COVARIATES = (("sex", 0.456), ("edu", 0.442))


@dataclass(frozen=True)
class StudyDesign:
    """Cohort layout for the simulator.

    Baseline ages are uniform on [age_low, age_high] and shifted onto the
    model's time scale by subtracting ``time_offset``.  Visits repeat at
    ``visit_gap_mean`` plus uniform jitter until ``followup`` years have
    passed; survivors optionally get a final status-unknown row at the
    censoring date.  ``covariates`` maps names to Bernoulli prevalences.
    """

    n_subjects: int = 1000
    baseline_state_probs: tuple[float, ...] | None = None
    age_low: float = 50.0
    age_high: float = 89.0
    time_offset: float = 49.0
    visit_gap_mean: float = 2.0
    visit_gap_jitter: float = 0.25
    followup: float = 12.0
    covariates: tuple[tuple[str, float], ...] = DEFAULT_COVARIATES
    record_alive_at_censoring: bool = True
    sim_step: float = 0.01

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ModelConfigError("n_subjects must be positive")
        if not self.age_high > self.age_low:
            raise ModelConfigError("need age_high > age_low")
        if self.visit_gap_mean - self.visit_gap_jitter <= 0:
            raise ModelConfigError("visit gaps must stay positive under jitter")
        if self.followup <= self.visit_gap_mean + self.visit_gap_jitter:
            raise ModelConfigError("followup must reach beyond the first return visit")
        if self.sim_step <= 0:
            raise ModelConfigError("sim_step must be positive")
        object.__setattr__(self, "covariates", tuple((str(n), float(p)) for n, p in self.covariates))
        for name, p in self.covariates:
            if not 0.0 <= p <= 1.0:
                raise ModelConfigError(f"covariate {name!r} prevalence {p} outside [0, 1]")
        if self.baseline_state_probs is not None:
            probs = tuple(float(p) for p in self.baseline_state_probs)
            if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
                raise ModelConfigError("baseline state probabilities must be >= 0 and sum to 1")
            object.__setattr__(self, "baseline_state_probs", probs)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.covariates)


def design_from_config(config: dict) -> StudyDesign:
    kwargs = dict(config)
    cov = kwargs.pop("covariates", None)
    if cov is not None:
        kwargs["covariates"] = tuple(cov.items()) if isinstance(cov, dict) else tuple(
            (c[0], c[1]) for c in cov
        )
    probs = kwargs.pop("baseline_state_probs", None)
    if probs is not None:
        kwargs["baseline_state_probs"] = tuple(probs)
    try:
        return StudyDesign(**kwargs)
    except TypeError as exc:
        raise ModelConfigError(f"bad study design: {exc}") from exc


def design_to_config(design: StudyDesign) -> dict:
    return {
        "n_subjects": design.n_subjects,
        "baseline_state_probs": list(design.baseline_state_probs)
        if design.baseline_state_probs is not None
        else None,
        "age_low": design.age_low,
        "age_high": design.age_high,
        "time_offset": design.time_offset,
        "visit_gap_mean": design.visit_gap_mean,
        "visit_gap_jitter": design.visit_gap_jitter,
        "followup": design.followup,
        "covariates": {n: p for n, p in design.covariates},
        "record_alive_at_censoring": design.record_alive_at_censoring,
        "sim_step": design.sim_step,
    }


def latent_state_at(events: list[tuple[float, int]], t: float) -> int:
    """State of a right-continuous event path at time t."""
    state = events[0][1]
    for when, s in events:
        if when <= t:
            state = s
        else:
            break
    return state


def _baseline_probs(design: StudyDesign, states: StateSpace) -> np.ndarray:
    if design.baseline_state_probs is None:
        probs = np.zeros(states.n_states)
        probs[states.living[0] - 1] = 1.0
        return probs
    probs = np.asarray(design.baseline_state_probs, dtype=float)
    if probs.shape != (states.n_states,):
        raise ModelConfigError(
            f"baseline_state_probs must have length {states.n_states}, got {probs.shape}"
        )
    for s in states.absorbing:
        if probs[s - 1] > 0:
            raise ModelConfigError(f"baseline probability on absorbing state {s}")
    return probs


def _subject_path(coefs, out_edges, rng, t0, t_end, x, state0, step):
    """Exact trajectory of the cell-frozen process from t0 to t_end."""
    n_cells = int(math.ceil((t_end - t0) / step - 1e-12))
    cell_starts = t0 + step * np.arange(n_cells)
    cell_ends = np.minimum(cell_starts + step, t_end)
    events = [(t0, state0)]
    tau = t0
    state = state0
    while True:
        edges = out_edges[state]
        if not edges:
            break
        j0 = min(int((tau - t0) / step), n_cells - 1)
        starts = cell_starts[j0:]
        widths = cell_ends[j0:] - np.maximum(starts, tau)
        x_rep = np.broadcast_to(x, (starts.shape[0], x.shape[0]))
        per_edge = np.empty((len(edges), starts.shape[0]))
        for e, (target, hz, cols) in enumerate(edges):
            per_edge[e] = hz.rate(starts, x_rep[:, cols], coefs[hz.coef_slice])
        total = per_edge.sum(axis=0)
        cum = np.cumsum(total * widths)
        draw = rng.exponential()
        if cum.size == 0 or draw > cum[-1]:
            break
        k = int(np.searchsorted(cum, draw))
        spent = cum[k - 1] if k > 0 else 0.0
        jump = max(float(starts[k]), tau) + (draw - spent) / total[k]
        dest_p = per_edge[:, k] / total[k]
        choice = int(rng.choice(len(edges), p=dest_p))
        state = edges[choice][0]
        tau = jump
        events.append((tau, state))
    return events


def simulate_panel(
    model: Model, theta_true, design: StudyDesign, seed: int = 0
) -> tuple[PanelDataset, list[dict]]:
    """Simulate a panel and return it with the latent trajectories.

    The latent record per subject has the exact event path, the death time
    if absorbed, and the scheduled visit times; tests use it as ground
    truth the panel only shows through interval censoring.
    """
    theta_true = np.asarray(theta_true, dtype=float)
    states = model.spec.states
    missing = [c for c in model.spec.covariate_names if c not in design.covariate_names]
    if missing:
        raise ModelConfigError(
            f"study design does not generate covariate(s) {missing} used by the model"
        )
    coefs = model.layout.expand(theta_true)
    probs = _baseline_probs(design, states)

    design_names = design.covariate_names
    model_cols = {
        name: design_names.index(name) for name in model.spec.covariate_names
    }
    out_edges: dict[int, list] = {s: [] for s in range(1, states.n_states + 1)}
    for hz in model.hazards:
        cols = np.asarray(
            [model_cols[c] for c in hz.transition.covariates], dtype=np.intp
        )
        out_edges[hz.transition.source].append((hz.transition.target, hz, cols))

    rows = []
    latent = []
    for i in range(design.n_subjects):
        rng = np.random.default_rng([seed, i])
        age = rng.uniform(design.age_low, design.age_high)
        t0 = age - design.time_offset
        state0 = int(rng.choice(states.n_states, p=probs)) + 1
        x = np.asarray([float(rng.random() < p) for _, p in design.covariates])
        t_end = t0 + design.followup
        n_gaps = int(design.followup / (design.visit_gap_mean - design.visit_gap_jitter)) + 2
        gaps = rng.uniform(
            design.visit_gap_mean - design.visit_gap_jitter,
            design.visit_gap_mean + design.visit_gap_jitter,
            size=n_gaps,
        )
        visits = t0 + np.concatenate(([0.0], np.cumsum(gaps)))
        visits = visits[visits <= t_end + 1e-12]

        events = _subject_path(
            coefs, out_edges, rng, t0, t_end, x, state0, design.sim_step
        )
        death_time = None
        if events[-1][1] in states.absorbing:
            death_time = events[-1][0]

        sid = i + 1
        cov_row = {name: val for (name, _), val in zip(design.covariates, x)}
        if death_time is not None:
            for t in visits:
                if t < death_time - 1e-12:
                    rows.append(
                        {"id": sid, "time": t, "state": latent_state_at(events, t), "death": 0, **cov_row}
                    )
            rows.append(
                {"id": sid, "time": death_time, "state": events[-1][1], "death": 1, **cov_row}
            )
        else:
            for t in visits:
                rows.append(
                    {"id": sid, "time": t, "state": latent_state_at(events, t), "death": 0, **cov_row}
                )
            if design.record_alive_at_censoring and t_end > visits[-1] + 1e-9:
                rows.append(
                    {"id": sid, "time": t_end, "state": RIGHT_CENSORED, "death": 0, **cov_row}
                )
        latent.append(
            {
                "id": sid,
                "events": [(float(t), int(s)) for t, s in events],
                "death_time": float(death_time) if death_time is not None else None,
                "visits": [float(t) for t in visits],
            }
        )
    frame = pd.DataFrame(rows)
    return dataset_from_frame(frame), latent


def state_table(data: PanelDataset, states: StateSpace) -> pd.DataFrame:
    """Counts of successive observed state pairs, one row per living state.

    Exactly observed deaths land in their absorbing state's column, counted
    from the last living state; right-censored final rows count nowhere.
    """
    living = states.living
    lookup = np.full(states.n_states + 2, -1, dtype=np.int64)
    for k, s in enumerate(living):
        lookup[s] = k
    table = np.zeros((len(living), states.n_states), dtype=np.int64)
    final = np.zeros(data.n_rows, dtype=bool)
    final[data.final_rows] = True
    left = np.nonzero(~final)[0]
    right = left + 1
    y0 = data.states[left]
    y1 = data.states[right]
    keep = y1 != RIGHT_CENSORED
    rows_idx = lookup[y0[keep]]
    if np.any(rows_idx < 0):
        bad = y0[keep][rows_idx < 0][0]
        raise ModelConfigError(f"pair departs from non-living state {bad}")
    np.add.at(table, (rows_idx, y1[keep] - 1), 1)
    return pd.DataFrame(
        table,
        index=pd.Index(list(living), name="from_state"),
        columns=pd.Index(range(1, states.n_states + 1), name="to_state"),
    )
