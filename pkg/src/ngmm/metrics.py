"""Evaluation metrics for the simulation study."""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import special

__all__ = [
    "LOGLOSS_CLAMP",
    "ZeroBaselineError",
    "bernoulli_logloss",
    "poisson_deviance",
    "relative_change",
    "rmse",
]

LOGLOSS_CLAMP = 1e-15


class ZeroBaselineError(ZeroDivisionError):
    pass


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.size != truth.size:
        raise ValueError(f"length mismatch: {pred.size} predictions, {truth.size} responses")
    if pred.size == 0:
        raise ValueError("need at least one value")
    return pred, truth


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return math.sqrt(float(np.mean((pred - truth) ** 2)))


def bernoulli_logloss(p_one, y) -> float:
    """Mean negative log predictive probability of the observed labels.

    ``p_one`` is the predictive P(y = 1) per observation.  Probabilities of
    the observed label below 1e-15 are clamped, with a warning.
    """
    p_one, y = _pair(p_one, y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("responses must be 0 or 1")
    p_obs = np.where(y == 1, p_one, 1.0 - p_one)
    if np.any(p_obs < LOGLOSS_CLAMP):
        warnings.warn("predictive probability of an observed label clamped at 1e-15",
                      RuntimeWarning, stacklevel=2)
        p_obs = np.maximum(p_obs, LOGLOSS_CLAMP)
    return float(-np.mean(np.log(p_obs)))


def poisson_deviance(pred_mean, y) -> float:
    """2 sum[y log(y / mu) - (y - mu)], with 0 log 0 = 0."""
    mu, y = _pair(pred_mean, y)
    if np.any(mu <= 0):
        raise ValueError("predicted means must be positive")
    return float(2.0 * np.sum(special.xlogy(y, y) - special.xlogy(y, mu) - (y - mu)))


def relative_change(v_ours, v_base) -> float:
    """(v_ours - v_base) / v_base; negative means lower error than the baseline."""
    if v_base == 0:
        raise ZeroBaselineError("relative change against a zero baseline")
    return (float(v_ours) - float(v_base)) / float(v_base)
