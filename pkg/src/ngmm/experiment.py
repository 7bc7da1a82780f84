"""Simulation-study grid: NGMM against a linear-architecture baseline.

For every family x effect x tau cell and repetition, a dataset is
simulated and split; the compared models are fitted on the training part
and scored on the existing-group and new-group test parts.

Baseline: linear f and g (the GLMM form), fitted by full-batch L-BFGS on
the marginal likelihood.  In the nonlinear suite the challenger is the
16-8-4 ReLU NGMM trained with mini-batch Adam; in the linear suite it is
the linear NGMM trained the same way.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product

import numpy as np
from scipy import optimize

from .autodiff import MlpArch, NumericError, grad, init_params
from .data import Dataset
from .expfam import ExpFamily, family
from .marginal import EVAL_TRUNCATION, Truncation
from .metrics import bernoulli_logloss, poisson_deviance, relative_change, rmse
from .model import layout
from .predict import predict_new, predict_observed
from .simdata import EFFECTS, FAMILIES, SimConfig, generate, split
from .training import FitConfig, TrainingAborted, fit, minibatch_objective

__all__ = [
    "ExperimentConfig",
    "BaselineResult",
    "cell_summary",
    "fit_baseline",
    "predictions",
    "run_cell",
    "run_experiment",
    "score",
]

TAUS = (0.1, 0.3, 0.5)
SPLITS = ("observed", "new")
METRIC = {"gaussian": "rmse", "logistic": "logloss", "poisson": "deviance"}
HIDDEN = (16, 8, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    suite: str = "nonlinear"
    repetitions: int = 5
    m: int = 50
    n_per_group: int = 40
    families: tuple = FAMILIES
    effects: tuple = EFFECTS
    taus: tuple = TAUS
    seed: int = 0
    batch_groups: int = 8
    iterations: int = 3000
    step_size: float = 1e-3
    train_M: float = 6.0
    train_steps: int = 128
    baseline_steps: int = 400
    baseline_maxiter: int = 500

    def __post_init__(self):
        if self.suite not in ("nonlinear", "linear"):
            raise ValueError(f"suite must be 'nonlinear' or 'linear', got {self.suite!r}")
        if int(self.repetitions) < 1:
            raise ValueError("repetitions must be positive")
        for f in self.families:
            if f not in FAMILIES:
                raise ValueError(f"families: unknown family {f!r}")
        for e in self.effects:
            if e not in EFFECTS:
                raise ValueError(f"effects: unknown effect {e!r}")
        object.__setattr__(self, "families", tuple(self.families))
        object.__setattr__(self, "effects", tuple(self.effects))
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("families", "effects", "taus"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config field(s): {sorted(unknown)}")
        return cls(**d)

    def fit_config(self, seed: int) -> FitConfig:
        return FitConfig(Truncation.symmetric(self.train_M, self.train_steps), self.batch_groups,
                         self.iterations, self.step_size, "adam", seed)


@dataclass(frozen=True)
class BaselineResult:
    params: np.ndarray
    objective: float
    converged: bool
    message: str = ""


@dataclass(frozen=True)
class CellResult:
    rows: tuple = field(default=())
    notes: tuple = field(default=())


def fit_baseline(train: Dataset, fam: ExpFamily, arch_f: MlpArch, arch_g: MlpArch, seed: int,
                 tr: Truncation, maxiter: int = 500) -> BaselineResult:
    """Full-batch L-BFGS on the mean truncated marginal log-likelihood."""
    cfg = FitConfig(truncation=tr, batch_groups=len(train), iterations=0, seed=seed)
    groups = list(train)

    def neg(values):
        try:
            v, g = grad(lambda p: minibatch_objective(fam, groups, p, arch_f, arch_g, cfg), values)
        except NumericError:
            return math.inf, np.zeros_like(values)
        if not (math.isfinite(v) and np.all(np.isfinite(g))):
            return math.inf, np.zeros_like(values)
        return -v, -g

    x0 = np.array(init_params(layout(arch_f, arch_g), seed).values)
    res = optimize.minimize(neg, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": maxiter, "gtol": 1e-6})
    ok = bool(res.success) and bool(np.all(np.isfinite(res.x))) and math.isfinite(res.fun)
    return BaselineResult(np.array(res.x), float(-res.fun), ok, str(res.message))


def predictions(fam: ExpFamily, params, arch_f: MlpArch, arch_g: MlpArch, train: Dataset,
                test: Dataset, mode: str, tr: Truncation = EVAL_TRUNCATION):
    """Predictive means (P(y=1) for Bernoulli) and responses, test rows in order."""
    known = train.by_id()
    means, ys = [], []
    for g in test:
        if mode == "observed":
            z_new = None if g.group_constant else g.z_matrix
            pred = predict_observed(fam, known[g.group_id], params, arch_f, arch_g, g.x, z_new, tr)
        elif mode == "new":
            pred = predict_new(fam, params, arch_f, arch_g, g.x,
                               g.z if g.group_constant else g.z_matrix, tr)
        else:
            raise ValueError(f"mode must be 'observed' or 'new', got {mode!r}")
        means.append(pred.mean)
        ys.append(g.y)
    return np.concatenate(means), np.concatenate(ys)


def score(fam_name: str, mean, y) -> float:
    if fam_name == "gaussian":
        return rmse(mean, y)
    if fam_name == "logistic":
        return bernoulli_logloss(mean, y)
    return poisson_deviance(mean, y)


def _archs(suite: str, p: int, q: int):
    hidden = HIDDEN if suite == "nonlinear" else ()
    ours = (MlpArch(p, hidden, 1, "relu"), MlpArch(q, hidden, 1, "relu"))
    base = (MlpArch(p, (), 1), MlpArch(q, (), 1))
    return ours, base


def cell_seed(base: int, rep: int, fam_name: str, effect: str, tau: float) -> int:
    """Distinct seed per (repetition, family, effect, tau); recorded on every row."""
    t = int(round(tau * 1000))
    return base * 10_000_000 + rep * 100_000 + FAMILIES.index(fam_name) * 10_000 \
        + EFFECTS.index(effect) * 1000 + t


def run_cell(cfg: ExperimentConfig, rep: int, fam_name: str, effect: str, tau: float) -> CellResult:
    seed = cell_seed(cfg.seed, rep, fam_name, effect, tau)
    sim = SimConfig(cfg.m, cfg.n_per_group, tau, fam_name, effect, cfg.suite, seed)
    sp = split(generate(sim), seed)
    fam = family(fam_name)
    (af, ag), (bf, bg) = _archs(cfg.suite, sp.train.p, sp.train.q)
    notes = []
    try:
        ours = fit(sp.train, fam, af, ag, cfg.fit_config(seed))
        ours_params = ours.params.values
        notes += [f"ngmm: {w}" for w in ours.warnings]
    except TrainingAborted as exc:
        ours_params = None
        notes.append(f"ngmm aborted: {exc}")
    base = fit_baseline(sp.train, fam, bf, bg, seed,
                        Truncation.symmetric(EVAL_TRUNCATION.M, cfg.baseline_steps),
                        cfg.baseline_maxiter)
    if not base.converged:
        notes.append(f"baseline did not converge: {base.message}")
    rows = []
    for mode, test in (("observed", sp.test_existing), ("new", sp.test_new)):
        row = {"suite": cfg.suite, "rep": rep, "seed": seed, "family": fam_name,
               "effect": effect, "tau": tau, "split": mode, "metric": METRIC[fam_name]}
        v_ours = v_base = rc = math.nan
        if ours_params is not None:
            v_ours = score(fam_name, *predictions(fam, ours_params, af, ag, sp.train, test, mode))
        if base.converged:
            v_base = score(fam_name, *predictions(fam, base.params, bf, bg, sp.train, test, mode))
        if math.isfinite(v_ours) and math.isfinite(v_base):
            rc = relative_change(v_ours, v_base)
        row.update(value=v_ours, baseline=v_base, relative_change=rc,
                   converged=bool(ours_params is not None and base.converged))
        rows.append(row)
    return CellResult(tuple(rows), tuple(notes))


def _run(args):
    return run_cell(*args)


def run_experiment(cfg: ExperimentConfig, jobs: int | None = None, progress=None) -> list[dict]:
    """All repetitions and cells; rows are returned in grid order regardless of ``jobs``."""
    jobs = jobs if jobs is not None else int(os.environ.get("NGMM_JOBS", "1"))
    tasks = [(cfg, rep, f, e, t) for rep, f, e, t in
             product(range(cfg.repetitions), cfg.families, cfg.effects, cfg.taus)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_run(task))
            if progress is not None:
                progress(task, results[-1])
    return [row for res in results for row in res.rows]


ROW_FIELDS = ("suite", "rep", "seed", "family", "effect", "tau", "split", "metric", "value",
              "baseline", "relative_change", "converged")


def rows_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in ROW_FIELDS])
    return buf.getvalue()


def cell_summary(rows) -> list[dict]:
    """Median relative change per (family, effect, tau, split) over converged repetitions."""
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["family"], r["effect"], r["tau"], r["split"])
        cells.setdefault(key, [])
        if r["converged"] and math.isfinite(r["relative_change"]):
            cells[key].append(r["relative_change"])
    out = []
    for key, vals in cells.items():
        fam_name, effect, tau, mode = key
        out.append({"family": fam_name, "effect": effect, "tau": tau, "split": mode,
                    "n": len(vals), "feasible": bool(vals),
                    "median_relative_change": float(np.median(vals)) if vals else math.nan})
    return out


def summary_csv(summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fields = ("family", "effect", "tau", "split", "n", "feasible", "median_relative_change")
    w.writerow(fields)
    for s in summary:
        w.writerow([repr(s[k]) if isinstance(s[k], float) else s[k] for k in fields])
    return buf.getvalue()
