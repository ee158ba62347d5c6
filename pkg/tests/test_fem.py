from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from rqmclab import fem, randomfield as rf
from rqmclab.errors import SolverError
from rqmclab.estimator import RqmcConfig, estimate
from rqmclab.gauss import norm_cdf, norm_pdf

PI = math.pi
SIGMA_W = fem.QOI_SMOOTHING


def manufactured_rhs(x):
    return 2 * PI**2 * np.sin(PI * x[..., 0]) * np.sin(PI * x[..., 1])


def manufactured_u(x):
    return np.sin(PI * x[..., 0]) * np.sin(PI * x[..., 1])


def unit(x):
    return np.ones(x.shape[:-1])


def weight_1d(x, a, b):
    return norm_cdf((b - x) / SIGMA_W) - norm_cdf((a - x) / SIGMA_W)


def weight_mass_on_square():
    # int_{-1}^{1} Phi((c - x)/s) dx = s [G((c+1)/s) - G((c-1)/s)],  G(t) = t Phi(t) + phi(t)
    G = lambda t: t * norm_cdf(t) + norm_pdf(t)
    out = 1.0
    for a, b in fem.QOI_BOX:
        F = lambda c: SIGMA_W * (G((c + 1) / SIGMA_W) - G((c - 1) / SIGMA_W))
        out *= F(b) - F(a)
    return out


def manufactured_qoi():
    out = 1.0
    for a, b in fem.QOI_BOX:
        out *= integrate.quad(lambda x: weight_1d(x, a, b) * math.sin(PI * x), -1, 1, epsabs=1e-15)[0]
    return out


@pytest.fixture(scope="module")
def basis():
    return rf.build_fourier_basis(s=16)


# mesh ----------------------------------------------------------------------


@pytest.mark.parametrize("N", [2, 5, 16])
def test_mesh_geometry(N):
    m = fem.Mesh(N)
    c = m.coords
    assert c.shape == (N + 1, N + 1, 2)
    np.testing.assert_allclose(np.diff(c[0, :, 0]), 2 / N, rtol=1e-13)
    on_edge = (np.abs(c[..., 0]) == 1) | (np.abs(c[..., 1]) == 1)
    np.testing.assert_array_equal(m.boundary, on_edge)
    assert m.connectivity.shape == (N * N, 4)
    assert m.quad_points.shape == (N, N, 4, 2)


def test_load_vector_integrates_constant():
    m = fem.Mesh(8)
    assert m.load_vector(1.0).sum() == pytest.approx(4.0, rel=1e-14)


# weight --------------------------------------------------------------------


def test_weight_center_value():
    v = fem.qoi_weight_eval(np.array([0.375, -0.375]))
    assert v == pytest.approx((norm_cdf(0.5) - norm_cdf(-0.5)) ** 2, rel=1e-14)
    assert v == pytest.approx(0.146631, abs=1e-6)


def test_weight_center_by_numeric_convolution():
    # 2-D convolution of the box indicator with the Gaussian, done by quadrature
    g = lambda y, x: norm_pdf((x - 0.375) / SIGMA_W) * norm_pdf((y + 0.375) / SIGMA_W) / SIGMA_W**2
    val, _ = integrate.dblquad(g, 0.25, 0.5, -0.5, -0.25, epsabs=1e-13)
    assert val == pytest.approx(0.146631, abs=1e-6)


def test_weight_far_value():
    assert fem.qoi_weight_eval(np.array([[5.0, 5.0], [-6.0, 2.0]])).max() < 1e-10


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_weight_range_and_reflection(x, y):
    w = fem.QoiWeight()
    cx, cy = w.center
    v = w(np.array([x, y]))
    assert 0 <= v < 1
    assert w(np.array([2 * cx - x, y])) == pytest.approx(v, rel=1e-9, abs=1e-300)
    assert w(np.array([x, 2 * cy - y])) == pytest.approx(v, rel=1e-9, abs=1e-300)


def test_weight_mass():
    exact = weight_mass_on_square()
    assert 0.06 < exact < 0.0625
    num, _ = integrate.dblquad(lambda y, x: float(fem.qoi_weight_eval(np.array([x, y]))), -1, 1, -1, 1, epsabs=1e-12)
    assert abs(num - exact) <= 1e-8
    m = fem.Mesh(256)
    q = m.weighted_integral_vector(fem.QoiWeight())
    assert abs(fem.qoi(np.ones_like(q), q) - exact) <= 1e-8


def test_qoi_of_zero():
    m = fem.Mesh(8)
    assert fem.qoi(np.zeros((9, 9)), m.weighted_integral_vector(fem.QoiWeight())) == 0.0


# solver --------------------------------------------------------------------


def test_manufactured_convergence_order():
    exact_q = manufactured_qoi()
    err_u, err_q = [], []
    for N in (16, 32, 64):
        m = fem.Mesh(N)
        sol = fem.assemble_and_solve(m, unit, manufactured_rhs)
        err_u.append(np.abs(sol.u[0] - manufactured_u(m.coords)).max())
        err_q.append(abs(fem.qoi(sol[0], m.weighted_integral_vector(fem.QoiWeight())) - exact_q))
    assert np.all(np.log2(np.array(err_u[:-1]) / err_u[1:]) >= 1.9)
    assert np.all(np.log2(np.array(err_q[:-1]) / err_q[1:]) >= 1.9)


def test_zero_load_gives_zero():
    sol = fem.assemble_and_solve(fem.Mesh(8), unit, 0.0)
    assert np.all(sol.u == 0)


def test_boundary_zero_and_residual():
    m = fem.Mesh(12)
    sol = fem.assemble_and_solve(m, lambda x: 1 + x[..., 0] ** 2, 1.0)
    assert np.all(sol.u[0][m.boundary] == 0.0)
    assert sol.residual[0] <= fem.DEFAULT_TOL


@pytest.mark.parametrize("kappa", [0.1, 3.0, 250.0])
def test_coefficient_scaling(kappa):
    m = fem.Mesh(10)
    a = lambda x: np.exp(0.5 * x[..., 0] * x[..., 1])
    u1 = fem.assemble_and_solve(m, a, 1.0).u[0]
    uk = fem.assemble_and_solve(m, lambda x: kappa * a(x), 1.0).u[0]
    np.testing.assert_allclose(uk * kappa, u1, rtol=1e-8, atol=1e-12)


def test_stencil_matches_sparse_assembly():
    m = fem.Mesh(6)
    rng = np.random.default_rng(0)
    a_quad = np.exp(rng.standard_normal((6, 6, 4)))
    K = fem.assemble_matrix(m, a_quad)
    assert (K - K.T).nnz == 0
    u = np.zeros((1, 7, 7))
    u[0, 1:-1, 1:-1] = rng.standard_normal((5, 5))
    via_stencil = fem._apply(fem.stencil(a_quad[None]), u)[0].ravel()
    np.testing.assert_allclose(K @ u[0, 1:-1, 1:-1].ravel(), via_stencil, rtol=1e-13)
    assert np.all(np.linalg.eigvalsh(K.toarray()) > 0)


def test_solution_matches_direct_solve():
    from scipy.sparse.linalg import spsolve

    m = fem.Mesh(10)
    a_quad = np.exp(np.random.default_rng(1).standard_normal((10, 10, 4)))
    sol = fem.assemble_and_solve(m, a_quad, 1.0)
    ref = spsolve(fem.assemble_matrix(m, a_quad).tocsc(), m.load_vector(1.0)[1:-1, 1:-1].ravel())
    np.testing.assert_allclose(sol.u[0, 1:-1, 1:-1].ravel(), ref, rtol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_maximum_principle(seed):
    m = fem.Mesh(8)
    rng = np.random.default_rng(seed)
    a_quad = np.exp(0.7 * rng.standard_normal((8, 8, 4)))
    f = lambda x: 1.0 + np.sin(3 * x[..., 0]) ** 2
    assert fem.assemble_and_solve(m, a_quad, f).u.min() >= -1e-12


def test_solver_error_reports_residual():
    m = fem.Mesh(8)
    coef = fem.stencil(np.ones((1, 8, 8, 4)))
    rhs = m.load_vector(1.0)[None, 1:-1, 1:-1]
    with pytest.raises(SolverError) as info:
        fem.pcg(coef, rhs, maxiter=2, context="unit test")
    assert info.value.residual > fem.DEFAULT_TOL
    assert "unit test" in str(info.value) or info.value.context == "unit test"


# PDE integrand -------------------------------------------------------------


def test_zero_sample_equals_mean_field(basis):
    P = fem.pde_integrand(basis, 1.0)
    m = fem.Mesh(16)
    ref = fem.qoi(fem.assemble_and_solve(m, unit, 1.0)[0], m.weighted_integral_vector(fem.QoiWeight()))
    assert P(np.full((1, 16), 0.5))[0] == pytest.approx(ref, rel=1e-10)


def test_integrand_deterministic(basis):
    P = fem.pde_integrand(basis, 0.8)
    t = np.random.default_rng(2).uniform(size=(5, 16))
    np.testing.assert_array_equal(P(t), P(t.copy()))


def test_warm_start_matches_cold(basis):
    y = np.random.default_rng(3).standard_normal((10, 16))
    warm = fem.pde_integrand(basis, 1.0, warm_start=True).gaussian(y)
    cold = fem.pde_integrand(basis, 1.0, warm_start=False).gaussian(y)
    np.testing.assert_allclose(warm, cold, rtol=1e-8)


def test_batch_independence(basis):
    y = np.random.default_rng(4).standard_normal((9, 16))
    whole = fem.pde_integrand(basis, 1.0, batch=256).gaussian(y)
    split = fem.pde_integrand(basis, 1.0, batch=4).gaussian(y)
    single = np.array([fem.pde_integrand(basis, 1.0).gaussian(row[None])[0] for row in y])
    np.testing.assert_array_equal(whole, split)
    np.testing.assert_array_equal(whole, single)


def test_field_matches_coefficients(basis):
    P = fem.pde_integrand(basis, 0.5)
    y = np.random.default_rng(6).standard_normal(16)
    np.testing.assert_allclose(P.field(y)(P.mesh.quad_points), P.coefficients(y[None])[0], rtol=1e-13)


def test_derivative_ranks_follow_b(basis):
    P = fem.pde_integrand(basis, 1.0)
    h = 1e-3
    q = P.gaussian(np.vstack([np.eye(16) * h, -np.eye(16) * h]))
    d = np.abs(q[:16] - q[16:]) / (2 * h)
    assert np.all(np.isfinite(d))
    assert stats.spearmanr(d, basis.b).statistic >= 0.8


@pytest.mark.slow
def test_two_seeds_agree():
    b4 = rf.build_fourier_basis(s=4)
    P = fem.pde_integrand(b4, 1.0)
    res = [estimate(P, RqmcConfig((2**10,), replicates=10, seed=s)) for s in (11, 29)]
    m1, m2 = (r.pooled[0] for r in res)
    se = math.hypot(res[0].rmse[0], res[1].rmse[0])
    assert abs(m1 - m2) <= 5 * se
