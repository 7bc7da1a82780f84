"""Synthetic grouped data and the train / test split protocol.

Covariates ``x1, x2 ~ N(0, 1)``, group effects ``gamma_j ~ N(0, tau^2)``
and linear predictor ``f*(x) + gamma_j`` (intercept) or
``f*(x) + x1 gamma_j`` (slope).  Responses are unit-variance Gaussian,
Bernoulli with logistic mean, or Poisson with log link.

Intercept data carry the group-constant design ``z = [1]``; slope data
carry the per-observation design ``z_i = [x1_i]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, GroupData
from .rng import SPLIT_STREAM, Stream, group_stream, obs_stream

__all__ = [
    "SimConfig",
    "SimSplit",
    "SimulationError",
    "fixed_effect_true",
    "generate",
    "split",
]

FAMILIES = ("gaussian", "logistic", "poisson")
EFFECTS = ("intercept", "slope")
DGPS = ("nonlinear", "linear")
LINEAR_BETA = (0.0, 0.1, 0.1)
MAX_RATE = 1e6
MAX_REDRAWS = 100
TRAIN_FRACTION = 0.7


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    m: int = 50
    n_per_group: int = 40
    tau: float = 0.3
    family: str = "gaussian"
    effect: str = "intercept"
    dgp: str = "nonlinear"
    seed: int = 0

    def __post_init__(self):
        if int(self.m) < 2:
            raise ValueError("m must be at least 2")
        if int(self.n_per_group) < 2:
            raise ValueError("n_per_group must be at least 2")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError("tau must be positive")
        for name, allowed in (("family", FAMILIES), ("effect", EFFECTS), ("dgp", DGPS)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "SimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation config field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SimSplit:
    train: Dataset
    test_existing: Dataset
    test_new: Dataset


@dataclass(frozen=True)
class SimTrace:
    """Latent draws behind a generated dataset."""

    gamma: np.ndarray
    eta: tuple[np.ndarray, ...]
    redraws: int


def fixed_effect_true(x1, x2, dgp: str = "nonlinear"):
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if dgp == "nonlinear":
        return np.sin(x1 + x2) + x1 * x2
    if dgp == "linear":
        b0, b1, b2 = LINEAR_BETA
        return b0 + b1 * x1 + b2 * x2
    raise ValueError(f"unknown dgp {dgp!r}")


def _draw_response(s: Stream, fam: str, eta: float) -> float:
    if fam == "gaussian":
        return eta + s.normal()
    if fam == "logistic":
        return float(s.bernoulli(1.0 / (1.0 + math.exp(-eta))))
    return float(s.poisson(math.exp(eta)))


def generate(cfg: SimConfig, trace: bool = False):
    """Simulate a dataset; with ``trace=True`` also return the latent draws."""
    groups, gammas, etas, redraws = [], [], [], 0
    for j in range(cfg.m):
        obs = [Stream(cfg.seed, obs_stream(j, i)) for i in range(cfg.n_per_group)]
        x = np.array([[s.normal(), s.normal()] for s in obs])
        fstar = fixed_effect_true(x[:, 0], x[:, 1], cfg.dgp)
        design = np.ones(cfg.n_per_group) if cfg.effect == "intercept" else x[:, 0]
        gs = Stream(cfg.seed, group_stream(j))
        for attempt in range(MAX_REDRAWS + 1):
            gamma = cfg.tau * gs.normal()
            eta = fstar + design * gamma
            if cfg.family != "poisson" or np.max(eta) <= math.log(MAX_RATE):
                break
            redraws += 1
        else:
            raise SimulationError(f"group {j}: Poisson rate above {MAX_RATE:g} after "
                                  f"{MAX_REDRAWS} redraws")
        y = np.array([_draw_response(s, cfg.family, e) for s, e in zip(obs, eta)])
        if cfg.effect == "intercept":
            groups.append(GroupData(y, x, z=[1.0], group_id=str(j)))
        else:
            groups.append(GroupData(y, x, z_matrix=x[:, :1].copy(), group_id=str(j)))
        gammas.append(gamma)
        etas.append(eta)
    data = Dataset(groups)
    if trace:
        return data, SimTrace(np.array(gammas), tuple(etas), redraws)
    return data


def _permutation(seed: int, stream: int, n: int) -> np.ndarray:
    """Uniform random permutation: stable argsort of n stream uniforms."""
    return np.argsort(Stream(seed, stream).uniform(n), kind="stable")


def split(data: Dataset, seed: int) -> SimSplit:
    """Hold out whole groups and, within kept groups, a share of observations.

    ``floor(0.7 m)`` groups go to training, the rest form the new-group
    test set.  In each training group ``floor(0.7 n_j)`` observations are
    kept for training and the rest form the existing-group test set.
    Groups and observations keep their original order.
    """
    m = len(data)
    if m < 2:
        raise ValueError("need at least two groups to split")
    n_train = int(math.floor(TRAIN_FRACTION * m))
    perm = _permutation(seed, SPLIT_STREAM, m)
    train_ids = np.sort(perm[:n_train])
    new_ids = np.sort(perm[n_train:])
    train, existing = [], []
    for j in train_ids:
        g = data[int(j)]
        k = int(math.floor(TRAIN_FRACTION * g.n))
        order = _permutation(seed, SPLIT_STREAM | (int(j) + 1), g.n)
        train.append(g.subset(np.sort(order[:k])))
        if k < g.n:
            existing.append(g.subset(np.sort(order[k:])))
    return SimSplit(Dataset(train), Dataset(existing), Dataset([data[int(j)] for j in new_ids]))


def manifest(cfg: SimConfig, split_seed: int, sp: SimSplit) -> str:
    doc = {
        "config": cfg.to_dict(),
        "split_seed": split_seed,
        "rng": "philox4x64-10",
        "counts": {
            "train_groups": len(sp.train),
            "train_obs": sp.train.n_obs,
            "test_existing_obs": sp.test_existing.n_obs,
            "test_new_groups": len(sp.test_new),
            "test_new_obs": sp.test_new.n_obs,
        },
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
