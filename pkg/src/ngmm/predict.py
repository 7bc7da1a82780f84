"""Plug-in prediction for observed and new groups.

For an observed group the posterior of the scalar effect xi is
``exp(L(xi)) / I`` on the quadrature grid; predictive quantities are
posterior averages of the conditional model.  For a new group the
posterior is the prior, so predictions depend on the random-effect
loading only through prior averages, and the Bernoulli class depends on
the fixed effect alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .autodiff import MlpArch, mlp_apply
from .data import GroupData
from .expfam import ExpFamily, inverse_link
from .marginal import EVAL_TRUNCATION, LogIntegrand, Truncation, effect_scale, log_phi, split_params

__all__ = [
    "PosteriorSummary",
    "Prediction",
    "new_group_probability",
    "posterior_summary",
    "predict_new",
    "predict_observed",
]

POISSON_TAIL = 1e-8
MIXTURE_CHUNK = 1 << 22  # elements per (rows x nodes x support) block


@dataclass(frozen=True)
class PosteriorSummary:
    """Posterior of the scalar effect on the quadrature grid.

    ``mean_t``/``var_t`` describe ``scale * xi``; for a per-observation
    design ``scale`` is 1 and the moments refer to xi itself.
    """

    log_normalizer: float
    mean_t: float
    var_t: float
    scale: float
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def mean_xi(self) -> float:
        return float(np.sum(self.weights * self.nodes))


@dataclass(frozen=True)
class Prediction:
    """Point predictions and, for discrete families, probabilities.

    ``mean``: predictive mean per row.  ``support``/``probs``: candidate
    values and their normalised probabilities (rows x candidates).
    ``label``: Bernoulli class per row.
    """

    mean: np.ndarray
    support: np.ndarray | None = None
    probs: np.ndarray | None = None
    label: np.ndarray | None = None


def _loadings_and_f(fam, group: GroupData, params, arch_f, arch_g):
    theta, psi = split_params(params, arch_f, arch_g)
    f = np.asarray(mlp_apply(arch_f, theta, group.x)).reshape(-1)
    if group.group_constant:
        b = float(effect_scale(np.asarray(mlp_apply(arch_g, psi, group.z))))
    else:
        if arch_g.output_dim != 1:
            raise ValueError("prediction for per-observation designs needs k = 1")
        b = np.asarray(mlp_apply(arch_g, psi, group.z_matrix)).reshape(-1)
    return f, b


def _trapezoid_logw(tr: Truncation) -> np.ndarray:
    h = (tr.xi1 - tr.xi0) / tr.steps
    logw = np.full(tr.steps + 1, math.log(h))
    logw[0] = logw[-1] = math.log(0.5 * h)
    return logw


def posterior_summary(fam: ExpFamily, group: GroupData, params, arch_f: MlpArch,
                      arch_g: MlpArch, tr: Truncation = EVAL_TRUNCATION) -> PosteriorSummary:
    """Normalizer, mean and variance of the scalar effect given the group's data."""
    f, b = _loadings_and_f(fam, group, params, arch_f, arch_g)
    nodes = tr.grid()
    lw = np.asarray(LogIntegrand(fam, group.y, f, b)(nodes)) + _trapezoid_logw(tr)
    logz = float(special.logsumexp(lw))
    w = np.exp(lw - logz)
    scale = b if np.ndim(b) == 0 else 1.0
    mean_xi = float(np.sum(w * nodes))
    var_xi = float(np.sum(w * (nodes - mean_xi) ** 2))
    return PosteriorSummary(logz, scale * mean_xi, scale * scale * var_xi, scale, nodes, w)


def _new_loadings(arch_g, psi, z_new, n):
    z_new = np.atleast_2d(np.asarray(z_new, dtype=float))
    g = np.asarray(mlp_apply(arch_g, psi, z_new))
    if z_new.shape[0] == 1 and n > 1:
        return np.full(n, effect_scale(g)[0])
    return effect_scale(g)


def _mixture(fam: ExpFamily, f, b, nodes, w) -> Prediction:
    """Predictive distribution of rows with linear predictor f + b xi, xi ~ w."""
    eta = f[:, None] + b[:, None] * nodes[None, :]
    mu = inverse_link(fam, eta)
    mean = mu @ w
    if fam.kind == "gaussian_unit_variance":
        return Prediction(mean)
    if fam.kind == "bernoulli":
        p1 = np.clip(mean, 0.0, 1.0)
        probs = np.stack([1.0 - p1, p1], axis=1)
        return Prediction(mean, np.array([0.0, 1.0]), probs, (p1 > 0.5).astype(int))
    y_max = int(stats.poisson.isf(POISSON_TAIL, float(np.max(mean))))
    support = np.arange(y_max + 1, dtype=float)
    # zero-weight nodes contribute nothing; chunk the rest to bound memory
    keep = w > 0
    mu, w = mu[:, keep], w[keep]
    log_fact = special.gammaln(support + 1)
    probs = np.zeros((mu.shape[0], support.size))
    chunk = max(1, MIXTURE_CHUNK // (mu.shape[0] * support.size))
    for s in range(0, w.size, chunk):
        m = mu[:, s:s + chunk, None]
        logpmf = special.xlogy(support, m) - m - log_fact
        probs += np.einsum("q,nqy->ny", w[s:s + chunk], np.exp(logpmf))
    probs /= probs.sum(axis=1, keepdims=True)
    return Prediction(mean, support, probs)


def predict_observed(fam: ExpFamily, group: GroupData, params, arch_f: MlpArch, arch_g: MlpArch,
                     x_new, z_new=None, tr: Truncation = EVAL_TRUNCATION) -> Prediction:
    """Bayes predictive for new rows ``x_new`` (n x p) of an observed group.

    ``z_new`` is needed only for per-observation designs (one row each).
    ``group=None`` means no evidence: the posterior is the prior and
    ``z_new`` supplies the design.
    """
    theta, psi = split_params(params, arch_f, arch_g)
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    f = np.asarray(mlp_apply(arch_f, theta, x_new)).reshape(-1)
    if group is None:
        if z_new is None:
            raise ValueError("z_new is required when there is no evidence")
        nodes = tr.grid()
        lw = log_phi(nodes) + _trapezoid_logw(tr)
        w = np.exp(lw - special.logsumexp(lw))
        b = _new_loadings(arch_g, psi, z_new, f.size)
        if fam.kind == "gaussian_unit_variance":
            return Prediction(f + b * float(np.sum(w * nodes)))
        return _mixture(fam, f, b, nodes, w)
    post = posterior_summary(fam, group, params, arch_f, arch_g, tr)
    if group.group_constant:
        b = np.full(f.size, post.scale)
    else:
        if z_new is None:
            raise ValueError("z_new is required for a per-observation design")
        b = np.asarray(mlp_apply(arch_g, psi, np.atleast_2d(z_new))).reshape(-1)
    if fam.kind == "gaussian_unit_variance":
        return Prediction(f + b * post.mean_xi)
    return _mixture(fam, f, b, post.nodes, post.weights)


def new_group_probability(fam: ExpFamily, f, b, tr: Truncation = EVAL_TRUNCATION) -> np.ndarray:
    """P(y = 1) = int mu(f + b xi) phi(xi) dxi for a Bernoulli family.

    The grid is symmetric and mirrored terms are added in pairs through
    the odd part of the mean function, so ``f = 0`` gives exactly 1/2.
    """
    f = np.asarray(f, dtype=float).reshape(-1, 1)
    b = np.asarray(b, dtype=float).reshape(-1, 1)
    M = tr.M
    h = 2.0 * M / tr.steps
    half = tr.steps // 2
    xi = h * np.arange(1, half + 1, dtype=float)
    w = np.exp(-0.5 * xi * xi)
    w[-1] *= 0.5
    if fam.link == "probit":
        def odd(a):
            return special.erf(a / math.sqrt(2.0))
    else:
        def odd(a):
            return np.tanh(0.5 * a)
    pair = odd(f + b * xi) + odd(f - b * xi)
    total = 1.0 + 2.0 * np.sum(w)
    s = odd(f[:, 0]) + pair @ w
    return 0.5 + 0.5 * s / total


def predict_new(fam: ExpFamily, params, arch_f: MlpArch, arch_g: MlpArch, x_new, z_new,
                tr: Truncation = EVAL_TRUNCATION) -> Prediction:
    """Prediction for rows of a group not seen in training.

    ``z_new``: a single design vector for the group, or one row per
    observation for a per-observation design.
    """
    theta, psi = split_params(params, arch_f, arch_g)
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    f = np.asarray(mlp_apply(arch_f, theta, x_new)).reshape(-1)
    b = _new_loadings(arch_g, psi, z_new, f.size)
    if fam.kind == "gaussian_unit_variance":
        return Prediction(f)
    if fam.kind == "poisson":
        return Prediction(np.exp(f + 0.5 * b * b))
    p1 = new_group_probability(fam, f, b, tr)
    probs = np.stack([1.0 - p1, p1], axis=1)
    return Prediction(p1, np.array([0.0, 1.0]), probs, (f > 0).astype(int))
