import math

import numpy as np
import pytest

from ngmm.autodiff import MlpArch
from ngmm.data import GroupData
from ngmm.expfam import family

LIN_F = MlpArch(2, (), 1)
LIN_G = MlpArch(1, (), 1)

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def linear_params(w, b, v, c):
    """Parameters of the linear (f, g) pair: f(x) = x.w + b, g(z) = v z + c."""
    return np.array([w[0], w[1], b, v, c], dtype=float)


def sample_response(rng, fam_name, eta):
    if fam_name == "gaussian":
        return eta + rng.normal(size=eta.shape)
    if fam_name in ("logistic", "probit"):
        return (rng.uniform(size=eta.shape) < 1 / (1 + np.exp(-eta))).astype(float)
    return rng.poisson(np.exp(np.clip(eta, -5, 3))).astype(float)


def random_linear_case(rng, fam_name, n=None, max_scale=2.0):
    """A random group with linear networks and known f values and scale r."""
    n = n or int(rng.integers(1, 11))
    x = rng.normal(size=(n, 2))
    w = rng.normal(scale=0.7, size=2)
    b = rng.normal(scale=0.5)
    r = rng.uniform(0.0, max_scale)
    v, c = (r, 0.0) if rng.uniform() < 0.5 else (0.5 * r, 0.5 * r)
    params = linear_params(w, b, v, c)
    f = x @ w + b
    y = sample_response(rng, fam_name, f + r * rng.normal())
    return GroupData(y, x, z=[1.0]), params, f, r


def gaussian_marginal(y, f, r):
    """log N(y; f, I + r^2 11^T) via the rank-one determinant and inverse."""
    e = np.asarray(y) - np.asarray(f)
    n = e.size
    d = 1.0 + n * r * r
    quad = e @ e - r * r * e.sum() ** 2 / d
    return -0.5 * n * math.log(2 * math.pi) - 0.5 * math.log(d) - 0.5 * quad


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(params=["gaussian", "logistic", "probit", "poisson"])
def fam_name(request):
    return request.param


@pytest.fixture
def fam(fam_name):
    return family(fam_name)
