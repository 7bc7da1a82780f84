import math

import numpy as np
import pytest
from scipy import stats

from ngmm.data import write_csv
from ngmm.rng import SPLIT_STREAM, Stream, group_stream, obs_stream
from ngmm.simdata import SimConfig, fixed_effect_true, generate, manifest, split


class TestStream:
    def test_deterministic_and_keyed(self):
        a = Stream(3, 7).uniform(5)
        assert np.array_equal(a, Stream(3, 7).uniform(5))
        assert not np.array_equal(a, Stream(3, 8).uniform(5))
        assert not np.array_equal(a, Stream(4, 7).uniform(5))

    def test_scalar_and_vector_uniforms_agree(self):
        s = Stream(1, 2)
        first = [s.uniform() for _ in range(4)]
        assert np.array_equal(first, Stream(1, 2).uniform(4))

    def test_uniform_open_interval(self):
        u = Stream(0, 1).uniform(100_000)
        assert 0 < u.min() and u.max() < 1
        assert stats.kstest(u, "uniform").pvalue > 1e-3

    def test_normal_moments(self):
        s = Stream(0, 5)
        z = np.array([s.normal() for _ in range(50_000)])
        assert abs(z.mean()) < 4 / math.sqrt(z.size)
        assert abs(z.var() - 1) < 4 * math.sqrt(2 / z.size)
        assert stats.kstest(z, "norm").pvalue > 1e-3

    @pytest.mark.parametrize("lam", [0.4, 3.0, 9.9, 10.0, 37.5, 400.0])
    def test_poisson_moments(self, lam):
        s = Stream(2, int(lam * 10))
        k = np.array([s.poisson(lam) for _ in range(40_000)])
        assert abs(k.mean() - lam) < 4 * math.sqrt(lam / k.size)
        assert abs(k.var() / lam - 1) < 0.05

    def test_poisson_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            Stream(0, 0).poisson(-1.0)

    def test_stream_ids_are_distinct(self):
        ids = {group_stream(j) for j in range(50)} | {obs_stream(j, i) for j in range(50) for i in range(40)}
        assert len(ids) == 50 + 2000 and SPLIT_STREAM not in ids


class TestFixedEffect:
    @pytest.mark.parametrize("x1,x2,dgp,expected", [(0, 0, "nonlinear", 0.0), (1, 0, "nonlinear", math.sin(1)),
                                                    (1, 1, "linear", 0.2)])
    def test_values(self, x1, x2, dgp, expected):
        assert float(fixed_effect_true(x1, x2, dgp)) == pytest.approx(expected, abs=1e-15)

    def test_unknown(self):
        with pytest.raises(ValueError):
            fixed_effect_true(0, 0, "cubic")


class TestGenerate:
    def test_determinism(self):
        cfg = SimConfig(m=5, n_per_group=6, family="poisson", effect="slope", seed=11)
        assert write_csv(generate(cfg)) == write_csv(generate(cfg))
        assert write_csv(generate(cfg)) != write_csv(generate(SimConfig(m=5, n_per_group=6, family="poisson",
                                                                        effect="slope", seed=12)))

    @pytest.mark.parametrize("kw", [dict(m=1), dict(tau=0.0), dict(family="gamma"), dict(effect="both"),
                                    dict(dgp="quadratic")])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**kw)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ValueError, match="sigma"):
            SimConfig.from_dict({"sigma": 1})

    def test_shapes_and_designs(self):
        data = generate(SimConfig(effect="intercept"))
        assert len(data) == 50 and all(g.n == 40 and g.group_constant for g in data)
        slope = generate(SimConfig(effect="slope"))
        for g in slope:
            np.testing.assert_array_equal(g.z_matrix[:, 0], g.x[:, 0])

    def test_covariate_sanity(self):
        x = np.concatenate([g.x for g in generate(SimConfig(seed=4))])
        mn = x.shape[0]
        assert np.all(np.abs(x.mean(axis=0)) < 4 / math.sqrt(mn))
        assert np.all(np.abs(x.var(axis=0) - 1) < 4 * math.sqrt(2 / mn))

    def test_slope_contribution_is_x1_gamma(self):
        cfg = SimConfig(effect="slope", dgp="nonlinear", seed=3)
        data, tr = generate(cfg, trace=True)
        for g, gamma, eta in zip(data, tr.gamma, tr.eta):
            fstar = fixed_effect_true(g.x[:, 0], g.x[:, 1])
            np.testing.assert_allclose(eta - fstar, g.x[:, 0] * gamma, rtol=0, atol=1e-14)

    @pytest.mark.parametrize("family", ["logistic", "poisson"])
    def test_response_support(self, family):
        y = generate(SimConfig(family=family, m=10)).responses()
        assert np.all(y == np.round(y)) and y.min() >= 0
        if family == "logistic":
            assert set(np.unique(y)) <= {0.0, 1.0}

    def test_poisson_rate_guard(self):
        data, tr = generate(SimConfig(family="poisson", tau=8.0, m=20, seed=1), trace=True)
        assert tr.redraws > 0
        assert max(float(np.max(e)) for e in tr.eta) <= math.log(1e6)

    def test_tiny_tau_leaves_noise_only(self):
        cfg = SimConfig(tau=1e-8, seed=2)
        data = generate(cfg)
        means = [np.mean(g.y - fixed_effect_true(g.x[:, 0], g.x[:, 1])) for g in data]
        target = 1 / cfg.n_per_group
        se = target * math.sqrt(2 / (cfg.m - 1))
        assert abs(np.var(means, ddof=1) - target) < 3 * se

    def test_pooled_group_mean_variance(self):
        tau, n = 0.5, 40
        vals = []
        for seed in range(100):
            data = generate(SimConfig(tau=tau, seed=seed))
            means = [np.mean(g.y - fixed_effect_true(g.x[:, 0], g.x[:, 1])) for g in data]
            vals.append(np.var(means, ddof=1))
        vals = np.array(vals)
        se = vals.std(ddof=1) / math.sqrt(vals.size)
        assert abs(vals.mean() - (tau ** 2 + 1 / n)) < 3 * se


class TestSplit:
    def test_counts(self):
        sp = split(generate(SimConfig()), 0)
        assert len(sp.train) == 35 and len(sp.test_new) == 15 and len(sp.test_existing) == 35
        assert all(g.n == 28 for g in sp.train) and all(g.n == 12 for g in sp.test_existing)

    def test_partition_recovers_dataset(self):
        data = generate(SimConfig(m=12, n_per_group=9, effect="slope", seed=5))
        sp = split(data, 9)
        train_ids = {g.group_id for g in sp.train}
        new_ids = {g.group_id for g in sp.test_new}
        assert train_ids.isdisjoint(new_ids) and train_ids | new_ids == {g.group_id for g in data}
        existing = sp.test_existing.by_id()
        for g in sp.train:
            full = data.by_id()[g.group_id]
            parts = np.concatenate([g.x, existing[g.group_id].x])
            rows = sorted(map(tuple, parts))
            assert rows == sorted(map(tuple, full.x))
            assert len(set(map(tuple, g.x)) & set(map(tuple, existing[g.group_id].x))) == 0

    def test_seeded(self):
        data = generate(SimConfig(m=10))
        a, b = split(data, 1), split(data, 1)
        assert write_csv(a.train) == write_csv(b.train)
        assert write_csv(split(data, 2).train) != write_csv(a.train)

    def test_manifest(self):
        import json
        cfg = SimConfig(m=10)
        doc = json.loads(manifest(cfg, 3, split(generate(cfg), 3)))
        assert doc["counts"]["train_groups"] == 7 and doc["config"] == cfg.to_dict()
