import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narrative_slds.gaussian import Gaussian, gibbs_z_conditional, kl_divergence, log_pdf, sample


def random_factor(rng, d, scale=1.0):
    return np.tril(rng.normal(size=(d, d)) * 0.4, -1) + np.diag(rng.uniform(0.5, 1.5, d)) * scale


def dense_log_pdf(mean, cov, x):
    d = len(mean)
    diff = x - mean
    return -0.5 * (d * np.log(2 * np.pi) + np.log(np.linalg.det(cov)) + diff @ np.linalg.inv(cov) @ diff)


def test_standard_normal_at_zero():
    assert log_pdf(Gaussian([0.0], [[1.0]]), [0.0]) == pytest.approx(-0.9189385332046727, abs=1e-15)


def test_mode_value(rng):
    L = random_factor(rng, 3)
    g = Gaussian(rng.normal(size=3), L)
    expect = -0.5 * np.log((2 * np.pi) ** 3 * np.linalg.det(L @ L.T))
    assert log_pdf(g, g.mean) == pytest.approx(expect, abs=1e-12)


def test_log_pdf_matches_dense_inverse(rng):
    for _ in range(5):
        L = random_factor(rng, 3)
        g = Gaussian(rng.normal(size=3), L)
        x = rng.normal(size=3) * 2
        assert abs(log_pdf(g, x) - dense_log_pdf(g.mean, L @ L.T, x)) < 1e-10


def test_log_pdf_integrates_to_one_on_grid():
    g = Gaussian([0.7], [[1.3]])
    grid = np.arange(-20, 20, 1e-3)
    dens = np.exp([log_pdf(g, x) for x in grid])
    assert abs(np.log(np.trapezoid(dens, grid))) < 1e-4


def test_log_pdf_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        log_pdf(Gaussian(np.zeros(2), np.eye(2)), np.zeros(3))


def test_invalid_factor_rejected():
    with pytest.raises(ValueError):
        Gaussian(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        Gaussian(np.zeros(2), np.diag([1.0, 0.0]))


def test_degenerate_sample_returns_mean(rng):
    g = Gaussian([1.0, -2.0], np.zeros((2, 2)), validate=False)
    np.testing.assert_array_equal(sample(g, rng), [1.0, -2.0])


def test_sample_moments():
    xs = sample(Gaussian(np.zeros(2), np.eye(2)), np.random.default_rng(0), size=100_000)
    assert np.max(np.abs(xs.mean(0))) < 0.02
    assert np.max(np.abs(np.cov(xs.T) - np.eye(2))) < 0.05


def test_sample_reproducible():
    g = Gaussian([0.0, 1.0], [[1.0, 0.0], [0.3, 0.5]])
    a = sample(g, np.random.default_rng(5))
    b = sample(g, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_kl_zero_and_one_d():
    assert kl_divergence(Gaussian(np.zeros(3), np.eye(3)), Gaussian(np.zeros(3), np.eye(3))) == 0.0
    assert kl_divergence(Gaussian([1.0], [[1.0]]), Gaussian([0.0], [[1.0]])) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(3)
    q = Gaussian(rng.normal(size=2), random_factor(rng, 2))
    p = Gaussian(rng.normal(size=2), random_factor(rng, 2))
    xs = sample(q, rng, size=1_000_000)

    def batch_logpdf(g, x):
        from scipy.linalg import solve_triangular
        w = solve_triangular(g.cov_factor, (x - g.mean).T, lower=True)
        return -0.5 * (2 * np.log(2 * np.pi) + (w * w).sum(0)) - np.log(np.diag(g.cov_factor)).sum()

    terms = batch_logpdf(q, xs) - batch_logpdf(p, xs)
    se = terms.std() / np.sqrt(len(terms))
    assert abs(terms.mean() - kl_divergence(q, p)) < 3 * se


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_non_negative(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    q = Gaussian(rng.normal(size=d), random_factor(rng, d))
    p = Gaussian(rng.normal(size=d), random_factor(rng, d, scale=rng.uniform(0.2, 3)))
    assert kl_divergence(q, p) >= 0.0


# ------------------------------------------------------------ Z conditional


def test_conditional_equal_precision_average():
    g = gibbs_z_conditional(np.eye(1), np.eye(1), np.array([2.0]), Gaussian([0.0], [[1.0]]))
    assert g.cov[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert g.mean[0] == pytest.approx(1.0, abs=1e-15)


def test_conditional_zero_a_returns_q(rng):
    q = Gaussian(rng.normal(size=2), random_factor(rng, 2))
    g = gibbs_z_conditional(np.zeros((2, 2)), random_factor(rng, 2), rng.normal(size=2), q)
    np.testing.assert_allclose(g.mean, q.mean, atol=1e-12)
    np.testing.assert_allclose(g.cov, q.cov, atol=1e-12)


def quadrature_posterior(a, s2, z_next, mq, vq, bias=0.0):
    grid = np.arange(-20, 20 + 1e-3, 1e-3)
    logd = -0.5 * (z_next - a * grid - bias) ** 2 / s2 - 0.5 * (grid - mq) ** 2 / vq
    w = np.exp(logd - logd.max())
    w /= np.trapezoid(w, grid)
    mu = np.trapezoid(w * grid, grid)
    var = np.trapezoid(w * (grid - mu) ** 2, grid)
    return mu, var


def test_conditional_matches_grid_quadrature_1d():
    rng = np.random.default_rng(11)
    for _ in range(5):
        a, s, z_next = rng.normal(), rng.uniform(0.5, 2), rng.normal() * 2
        mq, sq, bias = rng.normal(), rng.uniform(0.5, 2), rng.normal()
        g = gibbs_z_conditional([[a]], [[s]], [z_next], Gaussian([mq], [[sq]]), bias=[bias])
        mu, var = quadrature_posterior(a, s * s, z_next, mq, sq * sq, bias)
        assert abs(g.mean[0] - mu) < 1e-5
        assert abs(g.cov[0, 0] - var) < 1e-5


def dense_joint_conditional(A, Sigma, b, z_next, mq, Sq):
    """Condition the joint Gaussian of (z, z_next) on z_next (moment form)."""
    cross = Sq @ A.T
    S = A @ Sq @ A.T + Sigma
    K = cross @ np.linalg.inv(S)
    return mq + K @ (z_next - A @ mq - b), Sq - K @ cross.T


def test_conditional_matches_dense_bayes_update_2d():
    rng = np.random.default_rng(12)
    for _ in range(10):
        A = rng.normal(size=(2, 2))
        B = random_factor(rng, 2)
        q = Gaussian(rng.normal(size=2), random_factor(rng, 2))
        z_next, b = rng.normal(size=2), rng.normal(size=2)
        g = gibbs_z_conditional(A, B, z_next, q, bias=b)
        mu, cov = dense_joint_conditional(A, B @ B.T, b, z_next, q.mean, q.cov)
        np.testing.assert_allclose(g.mean, mu, atol=1e-8, rtol=0)
        np.testing.assert_allclose(g.cov, cov, atol=1e-8, rtol=0)


def test_conditional_equals_row_vector_product_form(rng):
    # Row-vector product form: mean = (z_next Σ⁻¹ A + μ_q Σ_q⁻¹) Σ*, Σ* = (AᵀΣ⁻¹A + Σ_q⁻¹)⁻¹.
    A = rng.normal(size=(3, 3))
    B = random_factor(rng, 3)
    q = Gaussian(rng.normal(size=3), random_factor(rng, 3))
    z_next = rng.normal(size=3)
    Si, Sqi = np.linalg.inv(B @ B.T), np.linalg.inv(q.cov)
    cov = np.linalg.inv(A.T @ Si @ A + Sqi)
    mean = (z_next @ Si @ A + q.mean @ Sqi) @ cov
    g = gibbs_z_conditional(A, B, z_next, q)
    np.testing.assert_allclose(g.cov, cov, atol=1e-10)
    np.testing.assert_allclose(g.mean, mean, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_conditional_shrinks_covariance(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    q = Gaussian(rng.normal(size=d), random_factor(rng, d))
    g = gibbs_z_conditional(rng.normal(size=(d, d)), random_factor(rng, d), rng.normal(size=d), q)
    np.testing.assert_allclose(g.cov, g.cov.T, atol=1e-12)
    assert np.all(np.diag(g.cov_factor) > 0)
    gap = q.cov - g.cov
    assert np.min(np.linalg.eigvalsh(0.5 * (gap + gap.T))) > -1e-10


def test_conditional_shape_errors():
    q = Gaussian(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        gibbs_z_conditional(np.eye(3), np.eye(3), np.zeros(3), q)
    with pytest.raises(ValueError, match="singular"):
        gibbs_z_conditional(np.eye(2), np.zeros((2, 2)), np.zeros(2), q)
