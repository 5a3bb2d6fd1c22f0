import math

import numpy as np
import pytest
from scipy import integrate

from tracer_uq.rng import (RandomStream, gamma_cdf, gamma_inv_cdf, normal_cdf, normal_inv_cdf,
                           parse_seed)


def _bisect(f, lo, hi, target, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _phi_quad(x):
    # independent route: integrate the density over the smaller tail
    dens = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    if x < 0:
        return integrate.quad(dens, -np.inf, x, epsabs=0, epsrel=1e-13)[0]
    return 1.0 - integrate.quad(dens, x, np.inf, epsabs=0, epsrel=1e-13)[0]


def test_normal_cdf_reference_values():
    assert normal_cdf(0.0) == pytest.approx(0.5, abs=1e-15)
    assert normal_cdf(1.959963984540054) == pytest.approx(0.975, abs=1e-12)
    for x in (-3.1, -0.7, 0.4, 2.2):
        assert normal_cdf(x) == pytest.approx(_phi_quad(x), abs=1e-12)
        assert normal_cdf(x) + normal_cdf(-x) == pytest.approx(1.0, abs=1e-14)


def test_normal_inv_cdf_matches_bisection():
    for p in (1e-10, 0.025, 0.3, 0.975, 1 - 1e-9):
        ref = _bisect(_phi_quad, -10, 10, p)
        assert normal_inv_cdf(p) == pytest.approx(ref, abs=1e-8)
    p = np.linspace(1e-6, 1 - 1e-6, 101)
    assert np.allclose(normal_cdf(normal_inv_cdf(p)), p, atol=1e-14)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, np.nan])
def test_normal_inv_cdf_domain(p):
    with pytest.raises(ValueError):
        normal_inv_cdf(p)


def test_gamma_inverse_exponential_closed_form():
    p = np.array([0.0, 0.1, 0.5, 0.9, 0.999])
    assert np.allclose(gamma_inv_cdf(p, 1.0, 2.5), -2.5 * np.log1p(-p), rtol=1e-12, atol=0)


def test_gamma_inverse_shape3_by_quadrature():
    shape, scale = 3.0, 0.25

    def cdf(x):
        val, _ = integrate.quad(lambda t: t ** (shape - 1) * math.exp(-t / scale), 0, x)
        return val / (math.gamma(shape) * scale**shape)

    for p in (0.05, 0.5, 0.95):
        ref = _bisect(cdf, 0.0, 20.0, p)
        assert gamma_inv_cdf(p, shape, scale) == pytest.approx(ref, rel=1e-8)
        assert gamma_cdf(ref, shape, scale) == pytest.approx(p, abs=1e-9)
    with pytest.raises(ValueError):
        gamma_inv_cdf(1.0, shape, scale)
    with pytest.raises(ValueError):
        gamma_inv_cdf(0.5, -1.0, scale)


def test_streams_are_deterministic_and_distinct():
    a = RandomStream(0xDEADBEEF, (2, 3, 17, 0)).standard_normal(1000)
    b = RandomStream(0xDEADBEEF, (2, 3, 17, 0)).standard_normal(1000)
    c = RandomStream(0xDEADBEEF, (2, 3, 17, 1)).standard_normal(1000)
    d = RandomStream(0xDEADBEEE, (2, 3, 17, 0)).standard_normal(1000)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c) and not np.allclose(a, d)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.15


def test_child_stream_equals_full_path():
    s = RandomStream(7, (1,)).child(4, 2)
    assert np.array_equal(s.uniform(10), RandomStream(7, (1, 4, 2)).uniform(10))


def test_normal_moments():
    z = RandomStream(12345, (0,)).standard_normal(200_000)
    n = len(z)
    assert abs(z.mean()) < 4 / math.sqrt(n)
    assert abs(z.var() - 1.0) < 4 * math.sqrt(2 / n)
    assert abs(np.mean(z**3)) < 4 * math.sqrt(15 / n)


def test_uniform_open_interval():
    u = RandomStream(1, ()).uniform(100_000)
    assert u.min() > 0.0 and u.max() < 1.0


def test_parse_seed():
    assert parse_seed("0x10") == 16
    assert parse_seed("42") == 42
    assert parse_seed(2**64 - 1) == 2**64 - 1
    with pytest.raises(ValueError):
        parse_seed(2**64)
    with pytest.raises(ValueError):
        parse_seed(-1)
    with pytest.raises(ValueError):
        RandomStream(1, (-1,))
