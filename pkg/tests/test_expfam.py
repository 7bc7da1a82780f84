import math

import numpy as np
import pytest
from scipy import integrate, special

from ngmm import autodiff as ad
from ngmm.expfam import (DomainError, ExpFamily, conjugate, family, inverse_link, log_density,
                         log_partition, mean, natural_param)


class TestConstruction:
    @pytest.mark.parametrize("name,kind,link", [
        ("gaussian", "gaussian_unit_variance", "identity"),
        ("logistic", "bernoulli", "logit"),
        ("probit", "bernoulli", "probit"),
        ("poisson", "poisson", "log"),
    ])
    def test_aliases(self, name, kind, link):
        fam = family(name)
        assert (fam.kind, fam.link, fam.name) == (kind, link, name)

    def test_rejects_unknown_link(self):
        with pytest.raises(ValueError):
            ExpFamily("poisson", "identity")

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            family("gamma")

    @pytest.mark.parametrize("name,y", [("logistic", [0, 2]), ("poisson", [1.5]),
                                        ("poisson", [-1]), ("gaussian", [np.nan])])
    def test_support(self, name, y):
        with pytest.raises(DomainError):
            family(name).check_support(y)


class TestDensities:
    def test_bernoulli_normalizes(self):
        for fam in (family("logistic"), family("probit")):
            for eta in (-3.0, 0.0, 1.7):
                t = natural_param(fam, np.array(eta))
                total = sum(math.exp(log_density(fam, np.array(v), t)) for v in (0.0, 1.0))
                assert total == pytest.approx(1.0, abs=1e-12)

    def test_poisson_normalizes(self):
        fam = family("poisson")
        y = np.arange(200.0)
        assert np.exp(log_density(fam, y, np.array(1.3))).sum() == pytest.approx(1.0, abs=1e-12)

    def test_gaussian_normalizes(self):
        fam = family("gaussian")
        val, _ = integrate.quad(lambda y: math.exp(log_density(fam, np.array(y), np.array(0.4))),
                                -np.inf, np.inf)
        assert val == pytest.approx(1.0, abs=1e-10)

    def test_probit_natural_parameter(self):
        fam = family("probit")
        t = natural_param(fam, np.array(0.8))
        assert special.expit(t) == pytest.approx(special.ndtr(0.8), rel=1e-12)

    def test_probit_clamp_flag(self):
        flags = set()
        t = natural_param(family("probit"), np.array([0.0, 12.0]), flags)
        assert "probit_clamped" in flags
        assert np.all(np.isfinite(t))

    @pytest.mark.parametrize("name", ["gaussian", "logistic", "poisson"])
    def test_mean_is_derivative_of_log_partition(self, name):
        fam = family(name)
        t0 = np.array([-1.1, 0.0, 0.9])
        _, g = ad.grad(lambda p: ad.sum(log_partition(fam, p)), t0)
        np.testing.assert_allclose(g, mean(fam, t0), rtol=1e-12)

    @pytest.mark.parametrize("name", ["gaussian", "logistic", "probit", "poisson"])
    def test_inverse_link_matches_mean_of_natural_parameter(self, name):
        fam = family(name)
        eta = np.array([-2.0, 0.1, 1.5])
        np.testing.assert_allclose(mean(fam, natural_param(fam, eta)), inverse_link(fam, eta),
                                   rtol=1e-12)


class TestConjugate:
    @pytest.mark.parametrize("name,y,expected", [
        ("gaussian", [2.0], 2.0),
        ("logistic", [0.0], 0.0),
        ("logistic", [1.0], 0.0),
        ("poisson", [0.0], 0.0),
        ("poisson", [3.0], 3 * math.log(3) - 3),
    ])
    def test_values(self, name, y, expected):
        assert conjugate(family(name), y)[0] == pytest.approx(expected)

    @pytest.mark.parametrize("name,y", [("gaussian", 1.3), ("poisson", 4.0)])
    def test_is_supremum(self, name, y):
        fam = family(name)
        t = np.linspace(-10, 10, 20001)
        vals = y * t - log_partition(fam, t)
        assert conjugate(fam, [y])[0] == pytest.approx(vals.max(), abs=1e-6)
        assert np.all(vals <= conjugate(fam, [y])[0] + 1e-12)


class TestWorkedValues:
    @pytest.mark.parametrize("name,y,expected", [
        ("logistic", 1.0, 0.0),
        ("gaussian", 0.0, -0.5 * math.log(2 * math.pi)),
        ("poisson", 3.0, -math.log(6)),
    ])
    def test_log_base(self, name, y, expected):
        from ngmm.expfam import log_base
        assert float(log_base(family(name), np.array(y))) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("name,t,expected", [
        ("logistic", 0.0, math.log(2)),
        ("gaussian", 2.0, 2.0),
        ("logistic", 1000.0, 1000.0 + math.log1p(math.exp(-1000.0))),
    ])
    def test_log_partition(self, name, t, expected):
        assert float(log_partition(family(name), np.array(t))) == pytest.approx(expected, rel=1e-14)

    def test_natural_param_values(self):
        assert float(natural_param(family("logistic"), np.array(1.7))) == 1.7
        assert float(natural_param(family("probit"), np.array(0.0))) == pytest.approx(0.0, abs=1e-15)
        phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
        assert float(natural_param(family("probit"), np.array(1.0))) == pytest.approx(
            math.log(phi1 / (1 - phi1)), rel=1e-12)

    @pytest.mark.parametrize("name,y,t,expected", [
        ("logistic", 1.0, 0.0, -math.log(2)),
        ("gaussian", 1.0, 1.0, -0.5 * math.log(2 * math.pi)),
        ("poisson", 2.0, math.log(3), math.log(9 * math.exp(-3) / 2)),
    ])
    def test_log_density(self, name, y, t, expected):
        assert float(log_density(family(name), np.array(y), np.array(t))) == pytest.approx(
            expected, abs=1e-12)

    @pytest.mark.parametrize("name,t,expected", [("logistic", 0.0, 0.5), ("poisson", 0.0, 1.0),
                                                 ("gaussian", -2.5, -2.5)])
    def test_mean(self, name, t, expected):
        assert float(mean(family(name), np.array(t))) == pytest.approx(expected, abs=1e-15)
