import math

import numpy as np
import pytest
from scipy import special, stats

from tracer_uq import fields as fl
from tracer_uq.grids import BoxDomain, build_hierarchy, restrict_to_inner
from tracer_uq.rng import RandomStream


@pytest.fixture(scope="module")
def dom2():
    return BoxDomain((0.02, 0.02), 0.01, 0.0025, ((0.0075, 0.0125), (0.0175, 0.02)),
                     ((0.0075, 0.0125), (0.0075, 0.0125)))


@pytest.fixture(scope="module")
def levels2(dom2):
    return build_hierarchy(dom2, 8, 3)


@pytest.fixture(scope="module")
def dom3():
    return BoxDomain((0.02, 0.02, 0.02), 0.01, 0.005, ((0.005, 0.015), (0.005, 0.015), (0.015, 0.02)),
                     ((0.005, 0.015),) * 3)


@pytest.fixture(scope="module")
def levels3(dom3):
    return build_hierarchy(dom3, 4, 2)


# ---------------------------------------------------------------- Matérn parameters


def test_matern_params_integrality():
    assert fl.MaternParams(1, 3, 0.01, 2).k == 2
    assert fl.MaternParams(1, 2.5, 0.01, 3).k == 2
    assert fl.MaternParams(1, 1, 0.01, 2).k == 1
    with pytest.raises(fl.FieldError, match="nu must equal 2k−d/2"):
        fl.MaternParams(1, 2, 0.01, 2)
    with pytest.raises(fl.FieldError):
        fl.MaternParams(-1, 1, 0.01, 2)


@pytest.mark.parametrize("nu", [0.5, 1.0, 2.5, 3.0])
def test_matern_covariance_against_bessel_quadrature(nu):
    lam, sigma = 0.2, 1.3
    kappa = math.sqrt(8 * nu) / lam
    for r in (0.01, 0.05, 0.2, 0.5):
        x = kappa * r
        oracle = sigma**2 * 2 ** (1 - nu) / math.gamma(nu) * x**nu * fl.bessel_k_quad(nu, x)
        assert fl.matern_covariance(r, sigma, nu, lam) == pytest.approx(oracle, rel=1e-9)
    assert fl.matern_covariance(0.0, sigma, nu, lam) == pytest.approx(sigma**2)


def test_matern_half_is_exponential():
    r = np.linspace(0, 1, 11)
    assert np.allclose(fl.matern_covariance(r, 1.0, 0.5, 0.2), np.exp(-2 * r / 0.2), rtol=1e-12)


# ---------------------------------------------------------------- white noise


def test_white_noise_cell_variance(levels2):
    lvl = levels2[0]
    wn = fl.sample_white_noise(lvl, RandomStream(1, (0,)), batch=4000)
    ratio = wn.values.var(axis=0) / lvl.outer.volumes
    # var estimate of a unit-variance normal from n = 4000 has sd ≈ sqrt(2/n)
    assert abs(ratio.mean() - 1) < 4 * math.sqrt(2 / 4000 / lvl.outer.n_cells)
    c = np.corrcoef(wn.values[:, 0], wn.values[:, 1])[0, 1]
    assert abs(c) < 4 / math.sqrt(4000)


def test_coupling_sums_children(levels2):
    fine = levels2[2]
    wn = fl.sample_white_noise(fine, RandomStream(2, (0,)), batch=3)
    coarse = fl.couple_to_coarse(wn)
    assert coarse.level is levels2[1]
    direct = np.stack([np.bincount(fine.parent, weights=w, minlength=levels2[1].outer.n_cells) for w in wn.values])
    assert np.allclose(coarse.values, direct, rtol=0, atol=1e-15)
    assert np.allclose(coarse.values.sum(axis=1), wn.values.sum(axis=1), rtol=1e-12)
    with pytest.raises(fl.FieldError):
        fl.couple_to_coarse(fl.sample_white_noise(levels2[0], RandomStream(2, (1,))))


def test_coupled_coarse_noise_has_coarse_variance(levels2):
    wn = fl.sample_white_noise(levels2[1], RandomStream(3, (0,)), batch=4000)
    coarse = fl.couple_to_coarse(wn)
    ratio = coarse.values.var(axis=0) / levels2[0].outer.volumes
    assert abs(ratio.mean() - 1) < 0.01


# ---------------------------------------------------------------- QMC ordering


@pytest.mark.parametrize("ordering", fl.ORDERINGS)
def test_qmc_midpoint_gives_zero_noise(levels2, ordering):
    lvl = levels2[0]
    wn = fl.white_noise_from_qmc_point(lvl, np.full(lvl.outer.n_cells + 3, 0.5), ordering)
    assert np.all(wn.values == 0)


def test_hierarchical_map_is_white(levels2):
    # the map z -> cell integrals must have covariance diag(|cell|) exactly
    lvl = levels2[0]
    tree = fl.bisection_tree(lvl)
    A = tree.noise_from_normals(np.eye(lvl.outer.n_cells))
    assert np.allclose(A.T @ A, np.diag(lvl.outer.volumes), atol=1e-15, rtol=0)


def test_hierarchical_first_coordinate_is_total(levels2):
    lvl = levels2[0]
    n = lvl.outer.n_cells
    z = np.zeros(n)
    z[0] = 1.3
    vals = fl.bisection_tree(lvl).noise_from_normals(z)
    assert vals.sum() == pytest.approx(1.3 * math.sqrt(lvl.outer.volumes.sum()), rel=1e-12)
    # cells then share the total in proportion to area
    assert np.allclose(vals / lvl.outer.volumes, vals[0] / lvl.outer.volumes[0])
    zr = RandomStream(4, (0,)).standard_normal(n)
    zr[0] = 0.7
    assert fl.bisection_tree(lvl).noise_from_normals(zr).sum() == pytest.approx(
        0.7 * math.sqrt(lvl.outer.volumes.sum()), rel=1e-12)


def test_identity_ordering(levels2):
    lvl = levels2[0]
    u = RandomStream(5, (0,)).uniform(lvl.outer.n_cells)
    wn = fl.white_noise_from_qmc_point(lvl, u, "identity")
    assert np.allclose(wn.values, special.ndtri(u) * np.sqrt(lvl.outer.volumes))
    with pytest.raises(fl.FieldError):
        fl.white_noise_from_qmc_point(lvl, u[:-1], "identity")
    with pytest.raises(fl.FieldError):
        fl.white_noise_from_qmc_point(lvl, u, "zigzag")


# ---------------------------------------------------------------- SPDE sampler


def test_sampler_is_linear(levels2):
    lvl = levels2[1]
    p = fl.MaternParams(1, 3, 0.01, 2)
    s = fl.matern_sampler(lvl, p)
    w1 = fl.sample_white_noise(lvl, RandomStream(6, (0,))).values
    w2 = fl.sample_white_noise(lvl, RandomStream(6, (1,))).values
    assert np.allclose(s.sample(2.5 * w1 + w2), 2.5 * s.sample(w1) + s.sample(w2), atol=1e-12)
    assert np.all(s.sample(np.zeros_like(w1)) == 0)
    batch = s.sample(np.stack([w1, w2]))
    assert np.allclose(batch[0], s.sample(w1), atol=1e-14)
    assert np.all(batch[:, lvl.outer_boundary] == 0)


def _discrete_covariance(sampler, i, j):
    """Exact covariance of nodal values i, j of the discrete field (adjoint solves)."""
    lvl = sampler.level
    p = sampler.params
    idx = np.searchsorted(sampler.free, [i, j])
    rows = []
    for k in idx:
        w = np.zeros(len(sampler.free))
        w[k] = 1.0
        for _ in range(p.k - 1):
            w = sampler._mass_free * sampler._lu.solve(w)
        w = sampler._lu.solve(w)
        rows.append(p.eta * (sampler._load.T @ w))
    return float(np.sum(rows[0] * rows[1] * lvl.outer.volumes))


@pytest.mark.parametrize("nu", [1.0, 3.0])
def test_discrete_covariance_matches_closed_form(nu):
    # unit-square Ĝ, λ = 0.2; the discrete covariance is computed exactly
    dom = BoxDomain((0.6, 0.6), 0.2, 0.05, ((0.25, 0.35), (0.55, 0.6)), ((0.25, 0.35), (0.25, 0.35)))
    lvl = build_hierarchy(dom, 12, 3)[-1]
    p = fl.MaternParams(1, nu, 0.2, 2)
    s = fl.matern_sampler(lvl, p)
    g = lvl.outer
    c = fl.probe_indices(g, np.array([[0.3, 0.3]]))[0]
    for off in (0.0, 0.05, 0.1, 0.2):
        j = fl.probe_indices(g, np.array([[0.3 + off, 0.3]]))[0]
        r = np.linalg.norm(g.vertices[c] - g.vertices[j])
        assert _discrete_covariance(s, c, j) == pytest.approx(float(p.covariance(r)), abs=0.03)


# ---------------------------------------------------------------- copula and diffusion


def test_gamma_copula_median_and_tails():
    shape, scale = 3.0, 2.0
    assert fl.gamma_copula_field(0.0, shape, scale) == pytest.approx(special.gammaincinv(3, 0.5) * 2, rel=1e-12)
    # lower tail: P(a, x) ≈ x^a / (a Γ(a)) for small x
    p = special.ndtr(-8.0)
    x_small = (p * shape * math.gamma(shape)) ** (1 / shape)
    assert fl.gamma_copula_field(-8.0, shape, 1.0) == pytest.approx(x_small, rel=1e-4)
    # upper tail must stay finite and increasing
    up = fl.gamma_copula_field(np.array([6.0, 8.0, 10.0]), shape, 1.0)
    assert np.all(np.isfinite(up)) and np.all(np.diff(up) > 0)


def test_gamma_copula_monotone_and_rank_preserving():
    x = RandomStream(7, (0,)).standard_normal(2000)
    y = fl.gamma_copula_field(x, 3.0, 1.0)
    order = np.argsort(x)
    assert np.all(np.diff(y[order]) >= 0)
    assert stats.spearmanr(x, y).statistic == pytest.approx(1.0)


def test_diffusion_field_bounds_and_mean():
    d_gad = 1.2e-10
    x = RandomStream(8, (0,)).standard_normal(20000)
    D = fl.diffusion_field(x, d_gad)
    assert np.all(D >= 0.25 * d_gad)
    # E[D*] = 0.25 D + shape * scale = D_Gad; sd of the sample mean ≈ 0.75 D / sqrt(3 n)
    assert D.mean() == pytest.approx(d_gad, abs=4 * 0.75 * d_gad / math.sqrt(3 * 20000))
    ks = stats.kstest((D - 0.25 * d_gad) / (0.25 * d_gad), stats.gamma(3).cdf)
    assert ks.pvalue > 0.001


# ---------------------------------------------------------------- velocities


def test_curl_of_linear_fields(levels2, levels3):
    g = levels2[0].inner
    psi = 2.0 * g.vertices[:, 0] - 3.0 * g.vertices[:, 1]
    v = fl.curl_p1(g, [psi])
    assert np.allclose(v, [-3.0, -2.0])
    g3 = levels3[0].inner
    x = g3.vertices
    # curl of (0, 0, x) is (0, -1, 0); curl of (y, 0, 0) is (0, 0, -1)
    v3 = fl.curl_p1(g3, [x[:, 1], np.zeros(len(x)), x[:, 0]])
    assert np.allclose(v3, [0.0, -1.0, -1.0])


@pytest.mark.parametrize("dim", [2, 3])
def test_model1_velocity_weakly_divergence_free(levels2, levels3, dim):
    lvl = (levels2 if dim == 2 else levels3)[-1]
    p = fl.MaternParams(1, 3.0 if dim == 2 else 2.5, 0.01, dim)
    n_f = 1 if dim == 2 else 3
    interior = ~lvl.inner.face_vertices(tuple(f"{s}{a}" for s in "+-" for a in "xyz"[:dim]))
    for i in range(5):
        wns = [fl.sample_white_noise(lvl, RandomStream(9, (i, f))) for f in range(n_f)]
        fields = [restrict_to_inner(fl.solve_matern(w, p), lvl) for w in wns]
        v = fl.velocity_model1(lvl.inner, fields, 0.3, p.lam, 1e-7)
        assert fl.weak_divergence_residual(lvl.inner, v, interior) <= 1e-11


def test_model1_velocity_is_odd_in_the_fields(levels2):
    lvl = levels2[0]
    p = fl.MaternParams(1, 3, 0.01, 2)
    X = restrict_to_inner(fl.solve_matern(fl.sample_white_noise(lvl, RandomStream(10, (0,))), p), lvl)
    v1 = fl.velocity_model1(lvl.inner, [X], 0.5, p.lam, 1e-7)
    v2 = fl.velocity_model1(lvl.inner, [-X], 0.5, p.lam, 1e-7)
    # antithetic pairs cancel, hence E[v_base] = 0 and E[v] = v_dir
    assert np.allclose(v1 + v2, 0.0, atol=1e-30)


def test_model1_rms_ratio_closed_form_and_measurement(levels2):
    assert fl.model1_rms_ratio(2.5, 3) ** 2 == pytest.approx(2.5)
    assert fl.model1_rms_ratio(3.0, 2) ** 2 == pytest.approx(0.75)
    lvl = levels2[-1]
    p = fl.MaternParams(1, 3, 0.005, 2)
    wn = fl.sample_white_noise(lvl, RandomStream(11, (0,)), batch=200)
    X = fl.matern_sampler(lvl, p).sample(wn)
    u = RandomStream(11, (1,)).uniform(200)
    ms = []
    for k in range(200):
        v = fl.velocity_model1(lvl.inner, [restrict_to_inner(X[k], lvl)], u[k], p.lam, 1.0)
        ms.append(np.sum(lvl.inner.volumes * np.sum(v * v, axis=1)) / lvl.inner.volumes.sum())
    measured = math.sqrt(np.mean(ms))
    # discretization lowers the gradient variance slightly; 15 % covers it
    assert measured == pytest.approx(fl.model1_rms_ratio(3.0, 2), rel=0.15)


def test_directional_flow_reference_formula():
    flow = fl.DirectionalFlow(2e-6, (0.0, 0.0, 0.0), 1.0)
    x = np.array([[0.05, -0.02, 0.03]])
    x1, x2, x3 = x[0]
    expect = -2e-6 * np.array([np.arctan(15 * x1) * (abs(x1) - 0.1), np.arctan(15 * x2) * (abs(x2) - 0.1),
                               -0.9 * x3 + 0.06 - math.hypot(x1, x2)])
    assert np.allclose(flow(x)[0], expect, rtol=1e-14)
    scaled = fl.DirectionalFlow(2e-6, (1.0, 1.0, 1.0), 0.5)
    assert np.allclose(scaled(1.0 + 0.5 * x), flow(x))


def test_model2_profile_values():
    R = 0.08
    assert fl.model2_profile(R, R) == pytest.approx(1.0)
    assert fl.model2_profile(1e-9, R) == pytest.approx(0.0, abs=1e-12)
    assert fl.model2_profile(2 * R, R) == 0.0
    assert fl.model2_profile(3 * R, R) == 0.0
    rho = 0.03
    assert fl.model2_profile(rho, R) == pytest.approx(math.exp(-3 * (R - rho) ** 2 / (R**2 - (R - rho) ** 2)))


def test_radial_inflow_calibration(dom2):
    flow = fl.RadialInflow(tuple(dom2.center), 0.08 * 0.02 / 0.17, 0.17e-6 * 0.02 / 0.17, dom2.extents)
    # independent spatial mean of rho^2 p(rho)^2: midpoint rule on a fine grid
    n = 800
    h = 0.02 / n
    xs = (np.arange(n) + 0.5) * h
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    rho = np.hypot(X - 0.01, Y - 0.01)
    m2 = np.mean((fl.model2_profile(rho, flow.R) * rho) ** 2)
    assert flow.mean_square_profile == pytest.approx(m2, rel=1e-4)
    # E[vbar^2] m2 = v_avg^2 for vbar ~ gamma(2, scale)
    assert 6 * flow.scale**2 * flow.mean_square_profile == pytest.approx(flow.v_avg**2, rel=1e-12)
    assert flow.vbar_from_uniform(0.5) == pytest.approx(special.gammaincinv(2, 0.5) * flow.scale, rel=1e-12)
    assert np.allclose(flow.field(np.array([dom2.center]), 1.0), 0.0)


def test_probe_indices(levels2):
    g = levels2[0].inner
    idx = fl.probe_indices(g, g.vertices[[3, 17]] + 1e-5)
    assert list(idx) == [3, 17]
