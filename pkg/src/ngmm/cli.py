"""Command-line interface.

Verbs: simulate, fit, predict, evaluate, experiment, truncation-study.
Each verb reads one JSON config (``--config``); missing keys take the
defaults shown by ``--print-config``.  Exit codes: 0 success, 2 user or
configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import MlpArch, NumericError
from .data import DataFormatError, Dataset, read_csv, validate_support, write_csv
from .expfam import family
from .marginal import EVAL_TRUNCATION, Truncation
from .model import NGMM
from .simdata import SimConfig, SimulationError, generate, manifest, split
from .training import FitConfig, TrainingAborted, fit, full_objective

__all__ = ["main"]

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3


class UserError(Exception):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _load_config(path, defaults: dict) -> dict:
    cfg = json.loads(json.dumps(defaults))
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UserError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UserError(f"config {path}: expected a JSON object")
    unknown = sorted(set(doc) - set(cfg))
    if unknown:
        raise UserError(f"config {path}: unknown field(s) {unknown}")
    cfg.update(doc)
    return cfg


def _write(path, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


# ------------------------------------------------------------------ simulate

SIMULATE_DEFAULTS = {**SimConfig().to_dict(), "split_seed": None}


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config, SIMULATE_DEFAULTS)
    split_seed = cfg.pop("split_seed")
    sim = SimConfig.from_dict(cfg)
    split_seed = sim.seed if split_seed is None else int(split_seed)
    sp = split(generate(sim), split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(sp.train, out / "train.csv")
    write_csv(sp.test_existing, out / "test_existing.csv")
    write_csv(sp.test_new, out / "test_new.csv")
    (out / "manifest.json").write_text(manifest(sim, split_seed, sp))
    return EXIT_OK


# ----------------------------------------------------------------------- fit

FIT_DEFAULTS = {
    "family": "gaussian",
    "link": None,
    "hidden_f": [16, 8, 4],
    "hidden_g": [16, 8, 4],
    "activation": "relu",
    "k": 1,
    "fit": FitConfig().to_dict(),
    "eval_truncation": EVAL_TRUNCATION.to_dict(),
}


def _family(cfg):
    try:
        return family(cfg["family"], cfg.get("link"))
    except ValueError as exc:
        raise UserError(f"family: {exc}") from None


def _read_data(path, fam=None, require_y=True) -> Dataset:
    data = read_csv(path, require_y=require_y)
    if fam is not None:
        validate_support(data, fam)
    return data


def cmd_fit(args) -> int:
    cfg = _load_config(args.config, FIT_DEFAULTS)
    fam = _family(cfg)
    fit_cfg = FitConfig.from_dict(cfg["fit"])
    data = _read_data(args.data, fam)
    arch_f = MlpArch(data.p, tuple(cfg["hidden_f"]), 1, cfg["activation"])
    arch_g = MlpArch(data.q, tuple(cfg["hidden_g"]), int(cfg["k"]), cfg["activation"])
    res = fit(data, fam, arch_f, arch_g, fit_cfg)
    model = NGMM(fam, res.params, Truncation.from_dict(cfg["eval_truncation"]))
    doc = model.to_json()
    doc["fit"] = fit_cfg.to_dict()
    doc["full_objective"] = res.full_objective
    doc["warnings"] = list(res.warnings)
    _write(args.out, _dump(doc))
    trace = args.trace or str(Path(args.out).with_suffix("")) + ".trace.csv"
    _write(trace, res.trace_csv())
    return EXIT_OK


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    return NGMM.from_json(doc), doc


def checkpoint_objective(path, data: Dataset) -> float:
    """Recompute the full-data training objective for a saved checkpoint."""
    model, doc = load_checkpoint(path)
    cfg = FitConfig.from_dict(doc["fit"])
    return full_objective(model.fam, data, model.params.values, model.arch_f, model.arch_g, cfg)


# ------------------------------------------------------------------- predict

PREDICT_DEFAULTS: dict = {}


def _prediction_rows(model: NGMM, data: Dataset, train: Dataset | None):
    from .predict import predict_new, predict_observed

    known = train.by_id() if train is not None else {}
    p = model.params.values
    for g in data:
        if g.group_id in known:
            mode = "observed"
            z_new = None if g.group_constant else g.z_matrix
            pred = predict_observed(model.fam, known[g.group_id], p, model.arch_f, model.arch_g,
                                    g.x, z_new, model.truncation)
        else:
            mode = "new"
            pred = predict_new(model.fam, p, model.arch_f, model.arch_g, g.x,
                               g.z if g.group_constant else g.z_matrix, model.truncation)
        for i in range(g.n):
            row = [g.group_id, i, mode, repr(float(pred.mean[i]))]
            if model.fam.kind == "bernoulli":
                row += [repr(float(pred.probs[i, 1])), int(pred.label[i])]
            yield row


def cmd_predict(args) -> int:
    _load_config(args.config, PREDICT_DEFAULTS)
    model, _ = load_checkpoint(args.checkpoint)
    data = _read_data(args.data, require_y=False)
    train = _read_data(args.train, model.fam) if args.train else None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["group_id", "row", "mode", "mean"]
    if model.fam.kind == "bernoulli":
        header += ["p1", "label"]
    w.writerow(header)
    for row in _prediction_rows(model, data, train):
        w.writerow(row)
    _write(args.out, buf.getvalue())
    return EXIT_OK


# ------------------------------------------------------------------ evaluate

EVALUATE_DEFAULTS = {"effect": "", "tau": None}


def cmd_evaluate(args) -> int:
    from .experiment import METRIC, predictions, score
    from .metrics import relative_change

    cfg = _load_config(args.config, EVALUATE_DEFAULTS)
    model, _ = load_checkpoint(args.checkpoint)
    train = _read_data(args.train, model.fam)
    test = _read_data(args.test, model.fam)
    fam_name = model.fam.name if model.fam.name != "probit" else "logistic"
    p = model.params.values
    value = score(fam_name, *predictions(model.fam, p, model.arch_f, model.arch_g, train, test,
                                         args.split, model.truncation))
    rc = ""
    if args.baseline:
        base, _ = load_checkpoint(args.baseline)
        v_base = score(fam_name, *predictions(base.fam, base.params.values, base.arch_f,
                                              base.arch_g, train, test, args.split,
                                              base.truncation))
        rc = repr(relative_change(value, v_base))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "effect", "tau", "split", "metric", "value", "relative_change_vs_linear"])
    w.writerow([model.fam.name, cfg["effect"], "" if cfg["tau"] is None else cfg["tau"],
                args.split, METRIC[fam_name], repr(value), rc])
    _write(args.out, buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------- experiment


def cmd_experiment(args) -> int:
    from .experiment import ExperimentConfig, cell_summary, rows_csv, run_experiment, summary_csv

    defaults = ExperimentConfig().to_dict()
    cfg = _load_config(args.config, defaults)
    if args.suite:
        cfg["suite"] = args.suite
    exp = ExperimentConfig.from_dict(cfg)
    jobs = args.jobs if args.jobs is not None else int(os.environ.get("NGMM_JOBS", "1"))

    def progress(task, res):
        _, rep, f, e, t = task
        if args.verbose:
            vals = " ".join(f"{r['split']}={r['relative_change']:+.3f}" for r in res.rows)
            print(f"rep {rep} {f} {e} tau={t}: {vals}", file=sys.stderr)

    rows = run_experiment(exp, jobs, progress)
    summary = cell_summary(rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(_dump(exp.to_dict()))
    (out / "rows.csv").write_text(rows_csv(rows))
    (out / "summary.csv").write_text(summary_csv(summary))
    feasible = [s for s in summary if s["feasible"]]
    better = sum(s["median_relative_change"] < 0 for s in feasible)
    print(f"{exp.suite}: median relative change < 0 in {better}/{len(feasible)} feasible cells")
    return EXIT_OK


# ---------------------------------------------------------- truncation study

STUDY_DEFAULTS = {
    "M_grid": [float(m) for m in np.arange(2.0, 8.01, 0.5)],
    "rescale_M_ref": None,
    "window": [4.0, 8.0],
    "studies": [
        {"name": "gaussian", "family": "gaussian", "f_vals": [0.0] * 5, "r": 1.0, "y": [0.0] * 5},
        {"name": "probit_ones", "family": "probit", "f_vals": [0.0] * 5, "r": 1.0,
         "y": [1.0] * 5},
        {"name": "probit_mixed", "family": "probit", "f_vals": [0.0] * 5, "r": 1.0,
         "y": [0.0, 0.0, 1.0, 1.0, 1.0]},
    ],
}


def cmd_truncation_study(args) -> int:
    from .truncation import StudySpec, run_study

    cfg = _load_config(args.config, STUDY_DEFAULTS)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["study", "M", "delta", "bound", "log_delta", "log_bound", "family"])
    lines = []
    for st in cfg["studies"]:
        st = dict(st)
        name = st.pop("name", st.get("family", "study"))
        try:
            spec = StudySpec(**st)
        except TypeError as exc:
            raise UserError(f"studies: {exc}") from None
        rep = run_study(spec, cfg["M_grid"], cfg["rescale_M_ref"], tuple(cfg["window"]))
        for M, ld, lb in zip(rep.M_grid, rep.log_delta, rep.log_bound):
            w.writerow([name, repr(float(M)), repr(math.exp(ld)), repr(math.exp(lb)),
                        repr(float(ld)), repr(float(lb)), spec.family])
        lines.append(f"{name}: fitted slope {rep.fitted_slope:.4f}, theory {rep.theory_slope:.4f}, "
                     f"bound violations at M={list(rep.violations)}")
    _write(args.out, buf.getvalue())
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------- main

COMMANDS = {
    "simulate": (cmd_simulate, SIMULATE_DEFAULTS),
    "fit": (cmd_fit, FIT_DEFAULTS),
    "predict": (cmd_predict, PREDICT_DEFAULTS),
    "evaluate": (cmd_evaluate, EVALUATE_DEFAULTS),
    "experiment": (cmd_experiment, None),
    "truncation-study": (cmd_truncation_study, STUDY_DEFAULTS),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ngmm", description="Neural generalized mixed-effects models")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--print-config", action="store_true", help="print defaults and exit")
        return p

    p = add("simulate", "simulate a dataset and write train/test splits")
    p.add_argument("--out", default="sim")
    p = add("fit", "fit a model to a CSV dataset")
    p.add_argument("--data")
    p.add_argument("--out", default="checkpoint.json")
    p.add_argument("--trace", help="objective trace CSV (default: <out>.trace.csv)")
    p = add("predict", "predict responses for covariate rows")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--train", help="training CSV; its groups are predicted as observed groups")
    p.add_argument("--out", default="predictions.csv")
    p = add("evaluate", "score a checkpoint on a test split")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="linear-architecture checkpoint for the relative change")
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--split", choices=("observed", "new"), default="new")
    p.add_argument("--out", default="evaluation.csv")
    p = add("experiment", "run the simulation grid")
    p.add_argument("--suite", choices=("nonlinear", "linear"))
    p.add_argument("--out", default="experiment")
    p.add_argument("--jobs", type=int, help="parallel cells (default: NGMM_JOBS or 1)")
    p.add_argument("--verbose", action="store_true")
    p = add("truncation-study", "truncation error against M")
    p.add_argument("--out", default="truncation.csv")
    return ap


REQUIRED = {
    "fit": ("data",),
    "predict": ("checkpoint", "data"),
    "evaluate": ("checkpoint", "train", "test"),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn, defaults = COMMANDS[args.command]
    if args.print_config:
        if defaults is None:
            from .experiment import ExperimentConfig

            defaults = ExperimentConfig().to_dict()
        sys.stdout.write(_dump(defaults))
        return EXIT_OK
    try:
        missing = [a for a in REQUIRED.get(args.command, ()) if getattr(args, a) is None]
        if missing:
            raise UserError(f"missing required option(s): {', '.join('--' + m for m in missing)}")
        return fn(args)
    except (UserError, DataFormatError, ValueError, KeyError, TypeError, FileNotFoundError,
            IsADirectoryError, PermissionError, json.JSONDecodeError) as exc:
        print(f"ngmm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (NumericError, TrainingAborted, SimulationError, ArithmeticError,
            np.linalg.LinAlgError) as exc:
        print(f"ngmm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
