import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from specdescent.diagnostics import (
    NonPositiveCurvature,
    Quadratic,
    alignment_gamma,
    descent_potential_phi,
    exact_descent_check,
    frobenius_curvature,
    inner,
    optimal_alpha,
    optimal_step,
)
from specdescent.rfmodel import make_rf_problem, rf_curvature, rf_grad, rf_loss, rf_quadratic


@pytest.fixture(scope="module")
def rf_small():
    return make_rf_problem(8, 8, 8, seed=3)


def test_gamma_examples(rng):
    g = rng.standard_normal((16, 16))
    d = rng.standard_normal((16, 16))
    assert alignment_gamma(g, g, d) == pytest.approx(1.0)
    assert alignment_gamma(2 * g, g, d) == pytest.approx(2.0)
    full = rng.standard_normal((16, 16))
    num = sum(full[i, j] * d[i, j] for i in range(16) for j in range(16))
    den = sum(g[i, j] * d[i, j] for i in range(16) for j in range(16))
    assert alignment_gamma(full, g, d) == pytest.approx(num / den, rel=1e-13)


def test_gamma_degenerate_direction():
    with pytest.raises(ValueError, match="degenerate direction"):
        alignment_gamma(np.ones((2, 2)), np.eye(2), np.array([[0.0, 1.0], [0.0, 0.0]]))


@given(seed=st.integers(0, 10_000), c=st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3))
def test_gamma_and_phi_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    g, gb, d = (rng.standard_normal((4, 5)) for _ in range(3))
    assert alignment_gamma(g, gb, c * d) == pytest.approx(alignment_gamma(g, gb, d), rel=1e-10)
    assert descent_potential_phi(gb, c * d, frobenius_curvature) == pytest.approx(
        descent_potential_phi(gb, d, frobenius_curvature), rel=1e-10
    )


def test_phi_identity_form(rng):
    g = rng.standard_normal((3, 4))
    assert descent_potential_phi(g, g, frobenius_curvature) == pytest.approx(inner(g, g))


def test_phi_rejects_nonpositive_curvature(rng):
    g = rng.standard_normal((3, 3))
    with pytest.raises(NonPositiveCurvature) as err:
        descent_potential_phi(g, g, lambda d: -inner(d, d))
    assert err.value.curvature < 0


def test_rf_curvature_matches_materialised_hessian(rf_small, rng):
    p = rf_small
    size = p.o_dim * p.d_dim
    hess = np.empty((size, size))
    f = rf_quadratic(p)
    for j in range(size):
        e = np.zeros(size)
        e[j] = 1.0
        hess[:, j] = f.hess(e.reshape(p.o_dim, p.d_dim)).ravel()
    d = rng.standard_normal((p.o_dim, p.d_dim))
    g = rf_grad(p)
    want = inner(g, d) ** 2 / (d.ravel() @ hess @ d.ravel())
    assert descent_potential_phi(g, d, lambda x: rf_curvature(p, x)) == pytest.approx(want, rel=1e-12)


def test_rf_quadratic_reproduces_loss(rf_small):
    f = rf_quadratic(rf_small)
    assert f.value(rf_small.w) == pytest.approx(rf_loss(rf_small), rel=1e-12)
    np.testing.assert_allclose(f.grad(rf_small.w), rf_grad(rf_small), atol=1e-13)


def test_descent_check_trivial_alphas(rf_small, rng):
    f = rf_quadratic(rf_small)
    d = rng.standard_normal(rf_small.w.shape)
    rec = exact_descent_check(f, rf_small.w, d, 0.0)
    assert rec.predicted_delta == 0.0 and rec.actual_delta == 0.0
    other_root = 2 * rec.gamma / rec.lam
    rec = exact_descent_check(f, rf_small.w, d, other_root)
    assert abs(rec.actual_delta) <= 1e-12 * abs(f.value(rf_small.w))
    assert abs(rec.predicted_delta) <= 1e-12


def test_descent_check_at_optimal_alpha(rf_small, rng):
    f = rf_quadratic(rf_small)
    d = rng.standard_normal(rf_small.w.shape)
    gb = rf_grad(rf_small) + 0.1 * rng.standard_normal(rf_small.w.shape)
    rec = exact_descent_check(f, rf_small.w, d, 0.3, g_batch=gb)
    rec = exact_descent_check(f, rf_small.w, d, optimal_alpha(rec), g_batch=gb)
    assert rec.actual_delta == pytest.approx(-0.5 * rec.phi * rec.gamma**2, rel=1e-10)


@given(seed=st.integers(0, 2**31), alpha=st.floats(1e-4, 10.0))
def test_descent_identity_is_exact_on_quadratics(seed, alpha):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((6, 6))
    h = m @ m.T + 0.1 * np.eye(6)
    f = Quadratic(lambda x: h @ x, rng.standard_normal((6, 3)))
    x, d = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    rec = exact_descent_check(f, x, d, alpha / f.curvature(d))
    assert rec.residual <= 1e-10 * max(abs(rec.actual_delta), 1e-300)
    assert rec.as_dict()["lambda"] == rec.lam


def test_full_gradient_lmo_direction_has_unit_gamma(rng):
    g = rng.standard_normal((5, 7))
    u, _, vt = np.linalg.svd(g, full_matrices=False)
    assert alignment_gamma(g, g, u @ vt) == pytest.approx(1.0, abs=1e-15)


def test_optimal_step_examples(rf_small, rng):
    p = rf_small
    g = rf_grad(p)
    # a direction with <G, D> = 0
    d = rng.standard_normal(g.shape)
    d -= inner(d, g) / inner(g, g) * g
    assert optimal_step(g, d, p.a_feat, p.d_dim) == pytest.approx(0.0, abs=1e-12)
    # scalar case: eta* = g / h with h = 2 a^2 / N
    a = np.array([[2.0]])
    assert optimal_step(np.array([[3.0]]), np.array([[1.0]]), a, 1) == pytest.approx(3.0 / (2 * 4.0))


def test_optimal_step_brackets_the_minimum(rf_small, rng):
    p = rf_small
    g = rf_grad(p)
    d = g + 0.5 * rng.standard_normal(g.shape)
    eta = optimal_step(g, d, p.a_feat, p.d_dim)
    at = rf_loss(p, p.w - eta * d)
    assert at <= rf_loss(p, p.w - 0.9 * eta * d)
    assert at <= rf_loss(p, p.w - 1.1 * eta * d)
