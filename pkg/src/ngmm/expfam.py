"""One-parameter exponential families with T(y) = y and their links.

All functions accept numpy arrays or autodiff nodes for the natural
parameter / linear predictor, so the same code serves taped training
objectives and plain numerical evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad

__all__ = [
    "DomainError",
    "ExpFamily",
    "PROBIT_CLAMP",
    "conjugate",
    "family",
    "inverse_link",
    "log_base",
    "log_density",
    "log_partition",
    "mean",
    "natural_param",
]

KINDS = ("gaussian_unit_variance", "bernoulli", "poisson")
LINKS = {
    "gaussian_unit_variance": ("identity",),
    "bernoulli": ("logit", "probit"),
    "poisson": ("log",),
}
CANONICAL = {"gaussian_unit_variance": "identity", "bernoulli": "logit", "poisson": "log"}
_ALIASES = {
    "gaussian": ("gaussian_unit_variance", None),
    "logistic": ("bernoulli", "logit"),
    "probit": ("bernoulli", "probit"),
}

PROBIT_CLAMP = 1e-15
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DomainError(ValueError):
    """A response lies outside the family's support."""


@dataclass(frozen=True)
class ExpFamily:
    kind: str
    link: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}; expected one of {KINDS}")
        link = self.link or CANONICAL[self.kind]
        if link not in LINKS[self.kind]:
            raise ValueError(f"link {link!r} is not available for {self.kind}")
        object.__setattr__(self, "link", link)

    @property
    def canonical(self) -> bool:
        return self.link == CANONICAL[self.kind]

    @property
    def support(self) -> str:
        return {"gaussian_unit_variance": "reals", "bernoulli": "binary",
                "poisson": "counts"}[self.kind]

    @property
    def name(self) -> str:
        if self.kind == "bernoulli":
            return "logistic" if self.link == "logit" else "probit"
        return "gaussian" if self.kind == "gaussian_unit_variance" else self.kind

    def check_support(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise DomainError("responses must be finite")
        if self.kind == "bernoulli" and not np.all((y == 0) | (y == 1)):
            raise DomainError("bernoulli responses must be 0 or 1")
        if self.kind == "poisson" and not np.all((y >= 0) & (y == np.floor(y))):
            raise DomainError("poisson responses must be non-negative integers")
        return y


def family(name: str, link: str | None = None) -> ExpFamily:
    """Build a family from a config string such as ``"logistic"`` or ``"poisson"``."""
    kind, default_link = _ALIASES.get(name, (name, None))
    return ExpFamily(kind, link or default_link)


def log_base(fam: ExpFamily, y) -> np.ndarray:
    """Log base measure log h(y)."""
    y = fam.check_support(y)
    if fam.kind == "gaussian_unit_variance":
        return -0.5 * y * y - HALF_LOG_2PI
    if fam.kind == "bernoulli":
        return np.zeros_like(y)
    return -special.gammaln(y + 1.0)


def log_partition(fam: ExpFamily, t):
    if fam.kind == "gaussian_unit_variance":
        return 0.5 * ad.square(t)
    if fam.kind == "bernoulli":
        return ad.softplus(t)
    return ad.exp(t)


def natural_param(fam: ExpFamily, linpred, flags: set | None = None):
    """Natural parameter (A')^{-1}(eta^{-1}(linpred)).

    Canonical links return ``linpred`` unchanged.  For probit the mean is
    clamped to ``[1e-15, 1 - 1e-15]``; when that happens ``"probit_clamped"``
    is added to ``flags``.
    """
    if fam.canonical:
        return linpred
    mu = 0.5 * (1.0 + ad.erf(linpred * (1.0 / math.sqrt(2.0))))
    mv = ad.value_of(mu)
    if flags is not None and np.any((mv < PROBIT_CLAMP) | (mv > 1.0 - PROBIT_CLAMP)):
        flags.add("probit_clamped")
    mu = ad.clip(mu, PROBIT_CLAMP, 1.0 - PROBIT_CLAMP)
    return ad.log(mu) - ad.log(1.0 - mu)


def log_density(fam: ExpFamily, y, t):
    """log h(y) + y t - A(t)."""
    return log_base(fam, y) + y * t - log_partition(fam, t)


def mean(fam: ExpFamily, t):
    """Conditional mean A'(t)."""
    if fam.kind == "gaussian_unit_variance":
        return t
    if fam.kind == "bernoulli":
        return ad.exp(t - ad.softplus(t))
    return ad.exp(t)


def inverse_link(fam: ExpFamily, linpred):
    """Mean response eta^{-1}(linpred) on plain arrays."""
    linpred = np.asarray(linpred, dtype=float)
    if fam.kind == "gaussian_unit_variance":
        return linpred
    if fam.kind == "poisson":
        return np.exp(linpred)
    if fam.link == "probit":
        return special.ndtr(linpred)
    return special.expit(linpred)


def conjugate(fam: ExpFamily, u) -> np.ndarray:
    """Convex conjugate A*(u) = sup_t (u t - A(t)) at observed responses."""
    u = fam.check_support(u)
    if fam.kind == "gaussian_unit_variance":
        return 0.5 * u * u
    if fam.kind == "bernoulli":
        return special.xlogy(u, u) + special.xlogy(1.0 - u, 1.0 - u)
    return special.xlogy(u, u) - u
