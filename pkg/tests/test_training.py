import math

import numpy as np
import pytest

from ngmm import training
from ngmm.autodiff import MlpArch, NumericError, grad, init_params
from ngmm.data import Dataset, GroupData
from ngmm.expfam import family
from ngmm.marginal import Truncation, group_loglik
from ngmm.model import layout
from ngmm.simdata import SimConfig, generate
from ngmm.training import FitConfig, TrainingAborted, fit, full_objective, minibatch_objective, sample_batch

from conftest import LIN_F, LIN_G, linear_params, random_linear_case

TR = Truncation.symmetric(6, 200)


class TestFitConfig:
    def test_round_trip(self):
        cfg = FitConfig(TR, 4, 10, 0.5, "adam", 3, 5, "ode")
        assert FitConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kw", [dict(batch_groups=0), dict(iterations=-1), dict(step_size=0.0),
                                    dict(optimizer="rmsprop"), dict(subsample_within_group=0),
                                    dict(method="simpson")])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            FitConfig(**kw)

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="learning_rate"):
            FitConfig.from_dict({"learning_rate": 0.1})


class TestObjective:
    def test_single_group(self, fam, rng):
        group, params, _, _ = random_linear_case(rng, fam.name)
        cfg = FitConfig(TR)
        v = minibatch_objective(fam, [group], params, LIN_F, LIN_G, cfg)
        assert float(v) == float(group_loglik(fam, group, params, LIN_F, LIN_G, TR, "quadrature"))

    def test_identical_groups(self, fam, rng):
        group, params, _, _ = random_linear_case(rng, fam.name)
        cfg = FitConfig(TR)
        one = float(minibatch_objective(fam, [group], params, LIN_F, LIN_G, cfg))
        two = float(minibatch_objective(fam, [group, group], params, LIN_F, LIN_G, cfg))
        assert two == pytest.approx(one, rel=1e-15)

    def test_full_batch_equals_direct_sum(self, fam, rng):
        cases = [random_linear_case(rng, fam.name) for _ in range(70)]
        groups = [c[0] for c in cases]
        params = cases[0][1]
        cfg = FitConfig(TR)
        direct = sum(float(group_loglik(fam, g, params, LIN_F, LIN_G, TR, "quadrature"))
                     for g in groups) / len(groups)
        assert float(minibatch_objective(fam, groups, params, LIN_F, LIN_G, cfg)) == pytest.approx(
            direct, abs=1e-12)
        assert full_objective(fam, groups, params, LIN_F, LIN_G, cfg) == pytest.approx(direct,
                                                                                      abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            minibatch_objective(family("gaussian"), [], np.zeros(5), LIN_F, LIN_G, FitConfig())


class TestSampling:
    def test_inclusion_frequency(self):
        m, b, draws = 20, 5, 10_000
        gen = np.random.Generator(np.random.PCG64(1))
        counts = np.zeros(m)
        for _ in range(draws):
            idx = sample_batch(gen, m, b)
            assert len(set(idx)) == b and np.all(np.diff(idx) > 0)
            counts[idx] += 1
        p = b / m
        se = math.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) < 3 * se + 1e-9) or \
            np.mean(np.abs(counts - draws * p) < 3 * se) >= 0.95


def _linear_gaussian_data(seed=0, m=30, n=12, w=(0.8, -0.5), b=0.3, r=0.7):
    gen = np.random.default_rng(seed)
    groups = []
    for j in range(m):
        x = gen.normal(size=(n, 2))
        y = x @ np.array(w) + b + r * gen.normal() + gen.normal(size=n)
        groups.append(GroupData(y, x, z=[1.0], group_id=str(j)))
    return Dataset(groups), linear_params(w, b, r, 0.0)


class TestFit:
    def test_zero_iterations_returns_init(self):
        data, _ = _linear_gaussian_data(m=5)
        res = fit(data, family("gaussian"), LIN_F, LIN_G, FitConfig(TR, 2, 0, seed=9))
        assert np.array_equal(res.params.values, init_params(layout(LIN_F, LIN_G), 9).values)
        assert res.objective_trace == ()

    def test_trace_length_and_determinism(self):
        data, _ = _linear_gaussian_data(m=10)
        cfg = FitConfig(TR, 3, 25, 0.05, "adam", 4)
        a = fit(data, family("gaussian"), LIN_F, LIN_G, cfg)
        b = fit(data, family("gaussian"), LIN_F, LIN_G, cfg)
        assert len(a.objective_trace) == 25
        assert a.objective_trace == b.objective_trace
        assert np.array_equal(a.params.values, b.params.values)
        assert a.full_objective == b.full_objective

    def test_recovers_linear_model(self):
        data, truth = _linear_gaussian_data()
        fam = family("gaussian")
        cfg = FitConfig(TR, 8, 1500, 1e-2, "adam", 0)
        res = fit(data, fam, LIN_F, LIN_G, cfg)
        at_truth = full_objective(fam, data, truth, LIN_F, LIN_G, cfg)
        assert res.full_objective >= at_truth - 0.05

    def test_running_mean_rises_on_gaussian_intercept(self):
        data = generate(SimConfig(family="gaussian", effect="intercept", seed=0))
        arch_f = MlpArch(2, (16, 8, 4), 1)
        arch_g = MlpArch(1, (16, 8, 4), 1)
        cfg = FitConfig()
        res = fit(data, family("gaussian"), arch_f, arch_g, cfg)
        half = np.asarray(res.objective_trace[: cfg.iterations // 2])
        means = half.reshape(-1, 50).mean(axis=1)
        assert np.all(np.diff(means) >= 0), means

    def test_full_batch_step_is_exact_gradient(self, rng):
        fam = family("logistic")
        cases = [random_linear_case(rng, "logistic") for _ in range(6)]
        groups = [c[0] for c in cases]
        init = init_params(layout(LIN_F, LIN_G), 2)
        cfg = FitConfig(TR, 6, 1, 0.1, "sgd", 2)
        res = fit(groups, fam, LIN_F, LIN_G, cfg)
        _, g = grad(lambda p: minibatch_objective(fam, groups, p, LIN_F, LIN_G, cfg), init.values)
        np.testing.assert_array_equal(res.params.values, init.values + 0.1 * g)

    def test_batch_larger_than_data(self):
        data, _ = _linear_gaussian_data(m=3)
        with pytest.raises(ValueError, match="batch_groups"):
            fit(data, family("gaussian"), LIN_F, LIN_G, FitConfig(TR, 4, 1))

    def test_support_checked(self):
        data = [GroupData([0.5], [[0.0, 0.0]], z=[1.0])]
        with pytest.raises(ValueError):
            fit(data, family("poisson"), LIN_F, LIN_G, FitConfig(TR, 1, 1))

    def test_subsampling_warns(self):
        data, _ = _linear_gaussian_data(m=4)
        res = fit(data, family("gaussian"), LIN_F, LIN_G, FitConfig(TR, 2, 3, subsample_within_group=5))
        assert any("biased" in w for w in res.warnings)

    def test_skips_nonfinite_step_and_continues(self, monkeypatch):
        data, _ = _linear_gaussian_data(m=4)
        real = training.minibatch_objective
        calls = {"n": 0}

        def flaky(*args, **kw):
            calls["n"] += 1
            if calls["n"] == 2:
                raise NumericError("synthetic", "test")
            return real(*args, **kw)

        monkeypatch.setattr(training, "minibatch_objective", flaky)
        res = fit(data, family("gaussian"), LIN_F, LIN_G, FitConfig(TR, 2, 4, 0.01))
        assert math.isnan(res.objective_trace[1])
        assert all(math.isfinite(v) for i, v in enumerate(res.objective_trace) if i != 1)
        assert any("iteration 1" in w for w in res.warnings)
        assert np.all(np.isfinite(res.params.values))

    def test_aborts_after_ten_consecutive_skips(self):
        data = [GroupData([3.0], [[1.0, 1.0]], z=[1.0])] * 2
        fam = family("poisson")
        bad = init_params(layout(LIN_F, LIN_G), 0).with_values(np.full(5, 400.0))
        with pytest.raises(TrainingAborted):
            fit(data, fam, LIN_F, LIN_G, FitConfig(TR, 1, 20), init=bad)

    def test_trace_csv(self):
        data, _ = _linear_gaussian_data(m=3)
        res = fit(data, family("gaussian"), LIN_F, LIN_G, FitConfig(TR, 2, 3))
        lines = res.trace_csv().splitlines()
        assert lines[0] == "iteration,value" and len(lines) == 4
        assert float(lines[1].split(",")[1]) == res.objective_trace[0]
