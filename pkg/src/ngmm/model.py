"""Fitted-model container and checkpoint format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import MlpArch, ParamVector, init_params, mlp_apply
from .expfam import ExpFamily, family
from .marginal import EVAL_TRUNCATION, Truncation, effect_scale, split_params

__all__ = ["NGMM", "layout"]


def layout(arch_f: MlpArch, arch_g: MlpArch) -> tuple:
    return (("f", arch_f), ("g", arch_g))


@dataclass(frozen=True)
class NGMM:
    """Family, the two network architectures, their parameters and the
    truncation used for evaluation."""

    fam: ExpFamily
    params: ParamVector
    truncation: Truncation = EVAL_TRUNCATION

    def __post_init__(self):
        if self.params.names != ("f", "g"):
            raise ValueError("parameters must be laid out as ('f', 'g')")

    @classmethod
    def init(cls, fam: ExpFamily, arch_f: MlpArch, arch_g: MlpArch, seed: int,
             truncation: Truncation = EVAL_TRUNCATION) -> "NGMM":
        return cls(fam, init_params(layout(arch_f, arch_g), seed), truncation)

    @property
    def arch_f(self) -> MlpArch:
        return self.params.arch("f")

    @property
    def arch_g(self) -> MlpArch:
        return self.params.arch("g")

    def with_values(self, values) -> "NGMM":
        return NGMM(self.fam, self.params.with_values(values), self.truncation)

    def fixed(self, x) -> np.ndarray:
        """f_theta(x) for an ``n x p`` covariate matrix, as a length-n vector."""
        theta, _ = split_params(self.params.values, self.arch_f, self.arch_g)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(mlp_apply(self.arch_f, theta, x)).reshape(-1)

    def loadings(self, z) -> np.ndarray:
        """g_psi(z) for one design vector (length k) or a matrix (rows x k)."""
        _, psi = split_params(self.params.values, self.arch_f, self.arch_g)
        return np.asarray(mlp_apply(self.arch_g, psi, np.asarray(z, dtype=float)))

    def scale(self, z) -> float | np.ndarray:
        return effect_scale(self.loadings(z))

    def to_json(self) -> dict:
        return {
            "family": self.fam.kind,
            "link": self.fam.link,
            "truncation": self.truncation.to_dict(),
            "params": self.params.to_json(),
        }

    @classmethod
    def from_json(cls, doc) -> "NGMM":
        fam = family(doc["family"], doc.get("link"))
        return cls(fam, ParamVector.from_json(doc["params"]),
                   Truncation.from_dict(doc.get("truncation", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "NGMM":
        return cls.from_json(json.loads(Path(path).read_text()))

