import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ngmm.metrics import ZeroBaselineError, bernoulli_logloss, poisson_deviance, relative_change, rmse

vec = arrays(float, st.integers(1, 20), elements=st.floats(-1e3, 1e3))


class TestRmse:
    def test_values(self):
        assert rmse([1, 2], [1, 2]) == 0
        assert rmse([1, 2], [1, 4]) == pytest.approx(math.sqrt(2))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            rmse([1, 2], [1])

    @given(vec, st.randoms())
    def test_paired_permutation_invariance(self, a, rnd):
        b = a[::-1] + 1.0
        perm = list(range(a.size))
        rnd.shuffle(perm)
        assert rmse(a[perm], b[perm]) == pytest.approx(rmse(a, b), rel=1e-12)


class TestLogloss:
    def test_half(self):
        assert bernoulli_logloss([0.5] * 4, [0, 1, 1, 0]) == pytest.approx(math.log(2))

    def test_perfect(self):
        assert bernoulli_logloss([1 - 1e-12, 1e-12], [1, 0]) == pytest.approx(0.0, abs=1e-11)

    def test_clamp_warns(self):
        with pytest.warns(RuntimeWarning):
            v = bernoulli_logloss([0.0], [1])
        assert v == pytest.approx(-math.log(1e-15))

    def test_two_ways(self, rng):
        p = rng.uniform(0.01, 0.99, size=50)
        y = (rng.uniform(size=50) < 0.5).astype(float)
        per_obs = [bernoulli_logloss([pi], [yi]) for pi, yi in zip(p, y)]
        assert bernoulli_logloss(p, y) == pytest.approx(np.mean(per_obs), abs=1e-12)

    def test_binary_required(self):
        with pytest.raises(ValueError):
            bernoulli_logloss([0.5], [2])


class TestDeviance:
    def test_values(self):
        assert poisson_deviance([1.0, 2.0], [1.0, 2.0]) == 0
        assert poisson_deviance([1.0], [0.0]) == pytest.approx(2.0)
        assert poisson_deviance([1.0], [2.0]) == pytest.approx(2 * (2 * math.log(2) - 1))

    def test_nonpositive_mean(self):
        with pytest.raises(ValueError):
            poisson_deviance([0.0], [1.0])

    @given(arrays(float, 5, elements=st.floats(0.01, 50)), arrays(float, 5, elements=st.integers(0, 60)))
    def test_non_negative(self, mu, y):
        assert poisson_deviance(mu, y) >= -1e-9


class TestRelativeChange:
    def test_values(self):
        assert relative_change(1.0, 1.0) == 0
        assert relative_change(0.9, 1.0) == pytest.approx(-0.1)
        assert relative_change(1.2, 1.0) > 0

    def test_zero_baseline(self):
        with pytest.raises(ZeroBaselineError):
            relative_change(1.0, 0.0)
