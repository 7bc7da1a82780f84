"""Mini-batch stochastic ascent on the truncated marginal log-likelihood.

Each iteration samples ``batch_groups`` groups uniformly without
replacement, averages their group log-likelihoods, differentiates the
average through the integrator with the tape, and takes an ascent step.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import MlpArch, NumericError, ParamVector, grad, init_params
from .data import Dataset, GroupData
from .expfam import ExpFamily
from .marginal import EVAL_TRUNCATION, TRAIN_TRUNCATION, Truncation, groups_loglik
from .model import NGMM, layout

__all__ = [
    "FitConfig",
    "FitResult",
    "TrainingAborted",
    "fit",
    "full_objective",
    "minibatch_objective",
    "sample_batch",
]

OPTIMIZERS = ("sgd", "adam")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
MAX_CONSECUTIVE_SKIPS = 10


class TrainingAborted(ArithmeticError):
    """Too many consecutive non-finite gradient steps."""


@dataclass(frozen=True)
class FitConfig:
    truncation: Truncation = TRAIN_TRUNCATION
    batch_groups: int = 8
    iterations: int = 1000
    step_size: float = 1e-3
    optimizer: str = "sgd"
    seed: int = 0
    subsample_within_group: int | None = None
    method: str = "quadrature"

    def __post_init__(self):
        if int(self.batch_groups) < 1:
            raise ValueError("batch_groups must be positive")
        if int(self.iterations) < 0:
            raise ValueError("iterations must be non-negative")
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ValueError("step_size must be a positive real")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.subsample_within_group is not None and int(self.subsample_within_group) < 1:
            raise ValueError("subsample_within_group must be positive when set")
        if self.method not in ("quadrature", "ode"):
            raise ValueError(f"method must be 'quadrature' or 'ode', got {self.method!r}")

    def to_dict(self) -> dict:
        return {
            "truncation": self.truncation.to_dict(),
            "batch_groups": self.batch_groups,
            "iterations": self.iterations,
            "step_size": self.step_size,
            "optimizer": self.optimizer,
            "seed": self.seed,
            "subsample_within_group": self.subsample_within_group,
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, d) -> "FitConfig":
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fit config field(s): {sorted(unknown)}")
        kw = dict(d)
        if "truncation" in kw:
            kw["truncation"] = Truncation.from_dict(kw["truncation"])
        return cls(**kw)


@dataclass(frozen=True)
class FitResult:
    params: ParamVector
    objective_trace: tuple[float, ...]
    full_objective: float
    warnings: tuple[str, ...] = field(default=())

    def model(self, fam: ExpFamily, truncation: Truncation = EVAL_TRUNCATION) -> NGMM:
        return NGMM(fam, self.params, truncation)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "value"])
        for t, v in enumerate(self.objective_trace):
            w.writerow([t, repr(float(v))])
        return buf.getvalue()


def minibatch_objective(fam: ExpFamily, batch: Sequence[GroupData], params, arch_f: MlpArch,
                        arch_g: MlpArch, cfg: FitConfig, flags=None):
    """Average truncated group log-likelihood over ``batch``."""
    batch = list(batch)
    if not batch:
        raise ValueError("mini-batch must contain at least one group")
    vals = groups_loglik(fam, batch, params, arch_f, arch_g, cfg.truncation, cfg.method, flags)
    return ad.sum(vals) * (1.0 / len(batch))


def full_objective(fam: ExpFamily, data, params, arch_f: MlpArch, arch_g: MlpArch,
                   cfg: FitConfig) -> float:
    """Full-data objective: mean over all groups, evaluated batch by batch
    in group order so the value does not depend on the training batch size."""
    if isinstance(params, ParamVector):
        params = params.values
    groups = list(data)
    vals = [np.asarray(groups_loglik(fam, groups[i: i + 64], params, arch_f, arch_g,
                                     cfg.truncation, cfg.method)) for i in range(0, len(groups), 64)]
    return float(np.sum(np.concatenate(vals)) / len(groups))


def sample_batch(rng: np.random.Generator, m: int, b: int) -> np.ndarray:
    """``b`` distinct group indices, uniform over subsets, in increasing order."""
    return np.sort(rng.choice(m, size=b, replace=False))


def _subsample(rng, group: GroupData, s: int) -> GroupData:
    if group.n <= s:
        return group
    return group.subset(np.sort(rng.choice(group.n, size=s, replace=False)))


def fit(data: Dataset | Sequence[GroupData], fam: ExpFamily, arch_f: MlpArch, arch_g: MlpArch,
        cfg: FitConfig = FitConfig(), init: ParamVector | None = None,
        callback: Callable[[int, float], None] | None = None) -> FitResult:
    """Run ``cfg.iterations`` ascent steps from ``init`` (default: seeded init).

    Identical data, config and seed give bit-identical results.
    """
    groups = list(data)
    m = len(groups)
    if m < 1:
        raise ValueError("dataset has no groups")
    if cfg.batch_groups > m:
        raise ValueError(f"batch_groups={cfg.batch_groups} exceeds the number of groups {m}")
    for g in groups:
        fam.check_support(g.y)
    params = init if init is not None else init_params(layout(arch_f, arch_g), cfg.seed)
    alpha = np.array(params.values, dtype=float)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    warnings: list[str] = []
    if cfg.subsample_within_group is not None:
        warnings.append("within-group subsampling: stochastic gradient is biased")
    m1 = np.zeros_like(alpha)
    m2 = np.zeros_like(alpha)
    trace: list[float] = []
    skips = updates = 0
    flags: set = set()
    for t in range(cfg.iterations):
        idx = sample_batch(rng, m, cfg.batch_groups)
        batch = [groups[i] for i in idx]
        if cfg.subsample_within_group is not None:
            batch = [_subsample(rng, g, cfg.subsample_within_group) for g in batch]
        try:
            value, g = grad(lambda p: minibatch_objective(fam, batch, p, arch_f, arch_g, cfg, flags),
                            alpha)
            ok = math.isfinite(value) and bool(np.all(np.isfinite(g)))
        except NumericError as exc:
            value, g, ok = float("nan"), None, False
            warnings.append(f"iteration {t}: {exc}")
        trace.append(value)
        if callback is not None:
            callback(t, value)
        if not ok:
            skips += 1
            warnings.append(f"iteration {t}: non-finite objective or gradient, step skipped")
            if skips >= MAX_CONSECUTIVE_SKIPS:
                raise TrainingAborted(f"{skips} consecutive non-finite steps at iteration {t}")
            continue
        skips = 0
        updates += 1
        if cfg.optimizer == "sgd":
            alpha = alpha + cfg.step_size * g
        else:
            m1 = ADAM_BETA1 * m1 + (1.0 - ADAM_BETA1) * g
            m2 = ADAM_BETA2 * m2 + (1.0 - ADAM_BETA2) * g * g
            mhat = m1 / (1.0 - ADAM_BETA1 ** updates)
            vhat = m2 / (1.0 - ADAM_BETA2 ** updates)
            alpha = alpha + cfg.step_size * mhat / (np.sqrt(vhat) + ADAM_EPS)
    if "probit_clamped" in flags:
        warnings.append("probit mean clamped to [1e-15, 1 - 1e-15]")
    out = params.with_values(alpha)
    return FitResult(out, tuple(trace), full_objective(fam, groups, out.values, arch_f, arch_g, cfg),
                     tuple(warnings))

