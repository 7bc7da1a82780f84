"""Counter-based random streams for reproducible simulation.

Every stream is Philox4x64-10 keyed by ``(seed, stream_id)`` and read as
raw 64-bit words from counter 0.  Variates are derived from the words by
fixed rules, so the same key yields the same numbers on any platform:

* uniform: ``((w >> 11) + 0.5) * 2**-53``, strictly inside (0, 1)
* normal: Box-Muller from two uniforms, cosine branch only
* Bernoulli(p): ``u < p``
* Poisson(lam): multiplicative inversion for ``lam < 10``, otherwise
  the transformed-rejection sampler PTRS.

Stream ids: ``(j + 1) << 32`` for the random effect of group j,
``(j + 1) << 32 | (i + 1)`` for observation i of group j, and
``SPLIT_STREAM | j`` for train/test splitting.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["SPLIT_STREAM", "Stream", "group_stream", "obs_stream"]

SPLIT_STREAM = 1 << 63
_TWO_M53 = 2.0 ** -53
_MASK64 = (1 << 64) - 1


def group_stream(j: int) -> int:
    return (j + 1) << 32


def obs_stream(j: int, i: int) -> int:
    return ((j + 1) << 32) | (i + 1)


class Stream:
    """Sequential variates from one Philox key."""

    def __init__(self, seed: int, stream: int):
        self.key = (int(seed) & _MASK64, int(stream) & _MASK64)
        self._bg = np.random.Philox(key=np.array(self.key, dtype=np.uint64))

    def raw(self, n: int | None = None):
        return self._bg.random_raw(n)

    def uniform(self, n: int | None = None):
        if n is None:
            return ((int(self._bg.random_raw()) >> 11) + 0.5) * _TWO_M53
        w = self._bg.random_raw(n) >> np.uint64(11)
        return (w.astype(float) + 0.5) * _TWO_M53

    def normal(self) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def bernoulli(self, p: float) -> int:
        return int(self.uniform() < p)

    def poisson(self, lam: float) -> int:
        if not lam >= 0.0 or not math.isfinite(lam):
            raise ValueError(f"invalid Poisson rate {lam}")
        if lam == 0.0:
            return 0
        if lam < 10.0:
            return self._poisson_inversion(lam)
        return self._poisson_ptrs(lam)

    def _poisson_inversion(self, lam: float) -> int:
        u = self.uniform()
        k, p = 0, math.exp(-lam)
        s = p
        while u > s and k < 1000:
            k += 1
            p *= lam / k
            s += p
        return k

    def _poisson_ptrs(self, lam: float) -> int:
        slam = math.sqrt(lam)
        loglam = math.log(lam)
        b = 0.931 + 2.53 * slam
        a = -0.059 + 0.02483 * b
        inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
        vr = 0.9277 - 3.6224 / (b - 2.0)
        while True:
            U = self.uniform() - 0.5
            V = self.uniform()
            us = 0.5 - abs(U)
            k = math.floor((2.0 * a / us + b) * U + lam + 0.43)
            if us >= 0.07 and V <= vr:
                return int(k)
            if k < 0 or (us < 0.013 and V > us):
                continue
            if (math.log(V) + math.log(inv_alpha) - math.log(a / (us * us) + b)
                    <= -lam + k * loglam - math.lgamma(k + 1.0)):
                return int(k)
