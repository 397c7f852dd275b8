"""Command-line driver: fit, search, predict, simulate, validate, statetable.

Every run writes its outputs plus a manifest (input hashes, seed, version,
timestamps) into the chosen output directory; failures leave a structured
error report instead.  Exit codes: 0 success, 1 unexpected, 2 usage or
configuration, 3 data validation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import DataValidationError, ModelConfigError, NumericalError
from .hazards import build_model
from .likelihood import load_panel, save_panel, validate_panel
from .markov import GridPolicy
from .modelspec import load_spec
from .predict import predict_curve, survival_curves
from .scoring import FitOptions, fit, lambda_search, load_fit, save_fit
from .simulate import design_from_config, simulate_panel, state_table

EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("PANELMSM_THREADS", "1")))
    except ValueError:
        return 1


def _grid_policy(args) -> GridPolicy:
    return GridPolicy(kind=args.grid_policy, step=args.h, anchor=args.anchor)


def _fit_options(args) -> FitOptions:
    return FitOptions(
        max_iter=args.max_iter,
        tol=args.tol,
        policy=_grid_policy(args),
        threads=args.threads,
    )


def _load_model_and_data(model_path, data_path, policy=None):
    spec = load_spec(model_path)
    data = load_panel(data_path)
    validate_panel(data, spec.states)
    if spec.spline_transitions():
        low, high = data.time_range()
        if policy is not None:
            low = policy.floor_time(low)
        model = build_model(spec, (low, high), sized_from_data=True)
    else:
        model = build_model(spec)
    return model, data


def _theta_from_payload(payload, layout) -> np.ndarray:
    names = list(layout.theta_names)
    if isinstance(payload, dict) and "theta" in payload:
        payload = payload["theta"]
    if isinstance(payload, dict):
        missing = [n for n in names if n not in payload]
        extra = sorted(set(payload) - set(names))
        if missing or extra:
            raise ModelConfigError(
                f"theta file does not match the model parameters; missing "
                f"{missing}, unknown {extra}"
            )
        return np.asarray([float(payload[n]) for n in names])
    arr = np.asarray(payload, dtype=float)
    if arr.shape != (len(names),):
        raise ModelConfigError(
            f"theta must have {len(names)} entries (model parameter order), "
            f"got shape {arr.shape}"
        )
    return arr


def _parse_covariates(text) -> dict:
    if not text:
        return {}
    out = {}
    for pair in text.split(","):
        if not pair.strip():
            continue
        if "=" not in pair:
            raise ModelConfigError(
                f"covariate assignment {pair!r} is not of the form name=value"
            )
        name, value = pair.split("=", 1)
        try:
            out[name.strip()] = float(value)
        except ValueError as exc:
            raise ModelConfigError(f"covariate value {value!r} is not a number") from exc
    return out


def _parse_lambda_grids(text):
    grids = []
    for block in text.split(";"):
        values = [v for v in block.split(",") if v.strip()]
        if not values:
            raise ModelConfigError(f"empty smoothing grid block in {text!r}")
        try:
            grids.append([float(v) for v in values])
        except ValueError as exc:
            raise ModelConfigError(f"bad smoothing grid {block!r}") from exc
    return grids


def _cmd_fit(args, out_dir: Path):
    model, data = _load_model_and_data(args.model, args.data, _grid_policy(args))
    if args.lambdas is not None:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    elif model.n_penalty_blocks == 0:
        lambdas = []
    else:
        raise ModelConfigError(
            "model has spline blocks; pass --lambdas or run the search command"
        )
    result = fit(model, data, lambdas, options=_fit_options(args))
    save_fit(result, out_dir / "fit.json")
    status = "converged" if result.converged else "NOT converged"
    print(
        f"fit {status} after {result.iterations} iteration(s): "
        f"-2*loglik={-2 * result.loglik:.3f} df={result.df:.2f} aic={result.aic:.3f}"
    )
    return ["fit.json"], {}


def _cmd_search(args, out_dir: Path):
    model, data = _load_model_and_data(args.model, args.data, _grid_policy(args))
    grids = _parse_lambda_grids(args.lambda_grid) if args.lambda_grid else None
    search = lambda_search(
        model,
        data,
        grids=grids,
        options=_fit_options(args),
        pin_plateau=args.pin_plateau,
    )
    n_blocks = model.n_penalty_blocks
    rows = []
    for entry in search.surface:
        row = {}
        for j in range(n_blocks):
            row[f"log10_lambda{j + 1}"] = entry["log10_lambdas"][j]
            row[f"lambda{j + 1}"] = entry["lambdas"][j]
        row.update(
            aic=entry["aic"],
            df=entry["df"],
            minus2_penalised_loglik=entry["minus2_penalised_loglik"],
            converged=entry["converged"],
        )
        rows.append(row)
    pd.DataFrame(rows).to_csv(out_dir / "aic_surface.csv", index=False)
    save_fit(search.best_fit, out_dir / "fit.json")
    _write_json(
        out_dir / "search.json",
        {
            "best_lambdas": list(search.best_lambdas),
            "best_aic": search.best_fit.aic,
            "best_df": search.best_fit.df,
            "plateau_blocks": list(search.plateau_blocks),
            "recommended_lambdas": list(search.recommended_lambdas)
            if search.recommended_lambdas is not None
            else None,
            "pinned": search.pinned,
            "n_grid_points": len(search.surface),
        },
    )
    print(
        f"search done over {len(search.surface)} grid point(s): "
        f"best lambdas {list(search.best_lambdas)} aic={search.best_fit.aic:.3f}"
        + (f" (plateau in block(s) {list(search.plateau_blocks)})" if search.plateau_blocks else "")
    )
    return ["aic_surface.csv", "fit.json", "search.json"], {}


def _cmd_predict(args, out_dir: Path):
    result = load_fit(args.fit)
    model = result.model
    x = _parse_covariates(args.covariates)
    curve = predict_curve(
        model,
        result.theta,
        result.covariance,
        t1=args.from_age,
        t2=args.from_age + args.horizon,
        x=x if x else None,
        h=args.h,
        n_draws=args.B,
        seed=args.seed,
        clip_covariance=args.clip_covariance,
    )
    D = model.n_states
    T = curve.times.shape[0]
    frm, to, tix = np.meshgrid(np.arange(D), np.arange(D), np.arange(T), indexing="ij")
    frame = pd.DataFrame(
        {
            "from_state": frm.ravel() + 1,
            "to_state": to.ravel() + 1,
            "time": curve.times[tix.ravel()],
            "point": curve.point[tix.ravel(), frm.ravel(), to.ravel()],
            "mean": curve.mc_mean[tix.ravel(), frm.ravel(), to.ravel()],
            "se": curve.mc_se[tix.ravel(), frm.ravel(), to.ravel()],
            "lower": curve.lower[tix.ravel(), frm.ravel(), to.ravel()],
            "upper": curve.upper[tix.ravel(), frm.ravel(), to.ravel()],
        }
    )
    frame.to_csv(out_dir / "predictions.csv", index=False)
    print(
        f"predicted {D}x{D} transition probabilities at {T} grid time(s) "
        f"from {args.from_age:g} using {args.B} draw(s)"
    )
    return ["predictions.csv"], {"seed": args.seed}


def _cmd_simulate(args, out_dir: Path):
    spec = load_spec(args.model)
    with open(args.design) as fh:
        design = design_from_config(json.load(fh))
    low = design.age_low - design.time_offset
    high = design.age_high - design.time_offset + design.followup
    model = build_model(spec, (low, high)) if spec.spline_transitions() else build_model(spec)
    with open(args.theta) as fh:
        theta = _theta_from_payload(json.load(fh), model.layout)
    data, latent = simulate_panel(model, theta, design, seed=args.seed)
    save_panel(data, out_dir / "panel.csv")
    outputs = ["panel.csv"]
    if args.latent:
        _write_json(out_dir / "latent.json", latent)
        outputs.append("latent.json")
    n_dead = int(data.death.sum())
    print(
        f"simulated {data.n_subjects} subject(s), {data.n_rows} row(s), "
        f"{n_dead} exactly observed death(s)"
    )
    return outputs, {"seed": args.seed}


def _cmd_validate(args, out_dir: Path):
    result = load_fit(args.fit)
    model = result.model
    data = load_panel(args.data)
    validate_panel(data, model.spec.states)
    if args.states:
        wanted = [int(s) for s in args.states.split(",")]
    else:
        first_states = data.states[data.first_rows]
        wanted = [s for s in model.spec.states.living if np.any(first_states == s)]
    outputs = []
    for state in wanted:
        curves = survival_curves(
            model, result.theta, data, state, horizon=args.horizon, h=args.h
        )
        km_surv, km_lo, km_hi = curves.km.evaluate(curves.times)
        summary = pd.DataFrame(
            {
                "time": curves.times,
                "model_mean": curves.mean,
                "km": km_surv,
                "km_lower": km_lo,
                "km_upper": km_hi,
            }
        )
        name = f"survival_state{state}.csv"
        summary.to_csv(out_dir / name, index=False)
        outputs.append(name)
        per_subject = pd.DataFrame(
            curves.curves.T,
            columns=[str(s) for s in curves.subject_ids],
        )
        per_subject.insert(0, "time", curves.times)
        name = f"survival_state{state}_subjects.csv"
        per_subject.to_csv(out_dir / name, index=False)
        outputs.append(name)
        print(
            f"state {state}: {curves.curves.shape[0]} subject curve(s), "
            f"{int(curves.events.sum())} death(s) in the comparison set"
        )
    return outputs, {}


def _cmd_statetable(args, out_dir: Path):
    spec = load_spec(args.model)
    data = load_panel(args.data)
    validate_panel(data, spec.states)
    table = state_table(data, spec.states)
    table.to_csv(out_dir / "statetable.csv")
    print(table.to_string())
    return ["statetable.csv"], {}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panelmsm",
        description="Multi-state survival models for interval-censored panel data",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_fit_flags(p):
        p.add_argument("--grid-policy", choices=["data", "imposed"], default="data")
        p.add_argument("--h", type=float, default=0.5, help="imposed grid step")
        p.add_argument("--anchor", type=float, default=0.0, help="imposed grid anchor")
        p.add_argument("--max-iter", type=int, default=100)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--threads", type=int, default=_default_threads())

    p = sub.add_parser("fit", help="fit a model at fixed smoothing parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lambdas", help="comma-separated smoothing parameters, one per spline block")
    add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("search", help="AIC grid search over smoothing parameters")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument(
        "--lambda-grid",
        help="per-block log10 grids: comma-separated values, blocks split by ';'",
    )
    p.add_argument("--pin-plateau", action="store_true")
    add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("predict", help="transition probabilities with MC bands")
    p.add_argument("--fit", required=True)
    p.add_argument("--from-age", type=float, required=True, dest="from_age",
                   help="start time on the model's time scale")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--covariates", help="comma-separated name=value pairs")
    p.add_argument("--B", type=int, default=1000, dest="B")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=0.5)
    p.add_argument("--clip-covariance", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("simulate", help="simulate a panel from a known model")
    p.add_argument("--model", required=True)
    p.add_argument("--theta", required=True, help="JSON with true parameter values")
    p.add_argument("--design", required=True, help="JSON study design")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent", action="store_true", help="also write latent paths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("validate", help="model-based survival vs Kaplan-Meier")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--states", help="comma-separated baseline states (default: observed)")
    p.add_argument("--horizon", type=float, default=12.0)
    p.add_argument("--h", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("statetable", help="successive observed state pair counts")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_statetable)
    return parser


def _error_payload(exc) -> dict:
    payload = {"error_type": type(exc).__name__, "message": str(exc)}
    context = getattr(exc, "context", None)
    if context:
        payload["context"] = context
    subject = getattr(exc, "subject_id", None)
    if subject is not None:
        payload["subject_id"] = subject if not hasattr(subject, "item") else subject.item()
    row = getattr(exc, "row", None)
    if row is not None:
        payload["row"] = int(row)
    return payload


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    inputs = {}
    for attr in ("model", "data", "theta", "design", "fit"):
        path = getattr(args, attr, None)
        if path is not None and Path(path).is_file():
            inputs[str(path)] = _sha256(path)
    try:
        outputs, extra = args.func(args, out_dir)
    except (ModelConfigError, DataValidationError, NumericalError) as exc:
        if isinstance(exc, NumericalError):
            code = EXIT_NUMERICAL
        elif isinstance(exc, DataValidationError):
            code = EXIT_DATA
        else:
            code = EXIT_USAGE
        payload = _error_payload(exc)
        _write_json(out_dir / "error_report.json", payload)
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # pragma: no cover - defensive
        payload = _error_payload(exc)
        payload["traceback"] = traceback.format_exc()
        _write_json(out_dir / "error_report.json", payload)
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED
    manifest = {
        "command": args.command,
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "version": __version__,
        "inputs": inputs,
        "outputs": outputs,
        "started": started,
        "finished": _now(),
    }
    manifest.update(extra)
    _write_json(out_dir / "manifest.json", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
