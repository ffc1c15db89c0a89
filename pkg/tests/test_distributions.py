import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import gammaln

from scorefp import distributions as dist


class TestMakeCovariance:
    @pytest.mark.parametrize("d", [2, 3, 5, 10, 11])
    def test_orthogonal_eigenspace(self, d):
        cov = dist.make_covariance(d, np.random.default_rng(d))
        assert np.allclose(cov.q @ cov.q.T, np.eye(d), atol=1e-12)

    @pytest.mark.parametrize("d", [2, 4, 10, 50])
    def test_reciprocal_pairs_unit_determinant(self, d):
        cov = dist.make_covariance(d, np.random.default_rng(d + 100))
        ev = cov.eigenvalues
        for i in range(0, d - 1, 2):
            assert np.isclose(ev[i] * ev[i + 1], 1.0, atol=1e-14)
        assert np.isclose(np.linalg.det(cov.sigma), 1.0, rtol=1e-10)

    def test_odd_d_extra_eigenvalue_range(self):
        cov = dist.make_covariance(7, np.random.default_rng(3))
        assert 1.0 <= cov.eigenvalues[-1] <= 1.1

    def test_eigenvalue_range(self):
        cov = dist.make_covariance(20, np.random.default_rng(0))
        assert np.all(cov.eigenvalues > 1.0 / 1.1 - 1e-12)
        assert np.all(cov.eigenvalues < 1.1 + 1e-12)

    def test_sqrt_consistency(self):
        cov = dist.make_covariance(6, np.random.default_rng(5))
        assert np.allclose(cov.sqrt_sigma @ cov.sqrt_sigma, cov.sigma, atol=1e-12)
        assert np.allclose(cov.sqrt_sigma, cov.sqrt_sigma.T, atol=1e-13)

    def test_reassembly_from_parts(self):
        cov = dist.make_covariance(4, np.random.default_rng(8))
        assert np.allclose(cov.q.T @ np.diag(cov.eigenvalues) @ cov.q,
                           cov.sigma, atol=1e-13)

    def test_d_below_two_rejected(self):
        with pytest.raises(ValueError):
            dist.make_covariance(1, np.random.default_rng(0))

    def test_json_round_trip(self):
        cov = dist.make_covariance(5, np.random.default_rng(2))
        back = dist.CovarianceSpec.from_json(cov.to_json())
        assert np.allclose(back.sigma, cov.sigma, atol=1e-15)
        assert np.allclose(back.sqrt_sigma, cov.sqrt_sigma, atol=1e-15)


class TestLogPdf:
    def test_unit_gaussian_origin(self):
        # N(0, I_10) at 0: -(10/2) log 2pi
        val = dist.log_pdf(dist.unit_gaussian(10), np.zeros(10))
        assert np.isclose(val, -5.0 * math.log(2 * math.pi), atol=1e-14)

    def test_gaussian_vs_scipy(self):
        from scipy.stats import multivariate_normal
        cov = dist.make_covariance(4, np.random.default_rng(1))
        mean = np.array([0.5, -1.0, 2.0, 0.0])
        den = dist.gaussian_density(mean, cov)
        x = np.array([1.0, 0.3, -0.2, 0.8])
        ref = multivariate_normal(mean=mean, cov=cov.sigma).logpdf(x)
        assert np.isclose(dist.log_pdf(den, x), ref, atol=1e-12)

    def test_log_normal_vs_scipy_1d_product(self):
        from scipy.stats import lognorm
        den = dist.log_normal_density(np.zeros(3), dist.isotropic_spec(3, 0.25))
        x = np.array([0.5, 1.1, 2.0])
        ref = sum(lognorm(s=0.5).logpdf(xi) for xi in x)
        assert np.isclose(dist.log_pdf(den, x), ref, atol=1e-12)

    def test_log_normal_support_error(self):
        den = dist.log_normal_density(np.zeros(2), dist.isotropic_spec(2))
        with pytest.raises(ValueError):
            dist.log_pdf(den, np.array([1.0, -0.5]))

    def test_cauchy_3d_origin(self):
        # d=3, gamma=1 at 0: log Gamma(2) - log Gamma(1/2) - (3/2) log pi = -2 log pi
        val = dist.log_pdf(dist.cauchy_density(3), np.zeros(3))
        assert np.isclose(val, -2.0 * math.log(math.pi), atol=1e-14)

    def test_cauchy_1d_matches_scipy(self):
        from scipy.stats import cauchy
        den = dist.cauchy_density(1, scale=2.0)
        for x in (0.0, 1.5, -3.0):
            assert np.isclose(dist.log_pdf(den, np.array([x])),
                              cauchy(scale=2.0).logpdf(x), atol=1e-13)

    def test_laplace_origin(self):
        val = dist.log_pdf(dist.laplace_density(1), np.zeros(1))
        assert np.isclose(val, -math.log(2.0), atol=1e-15)

    def test_laplace_vs_scipy(self):
        from scipy.stats import laplace
        den = dist.laplace_density(4, loc=0.3, b=1.7)
        x = np.array([1.0, -0.5, 0.3, 2.2])
        ref = laplace(loc=0.3, scale=1.7).logpdf(x).sum()
        assert np.isclose(dist.log_pdf(den, x), ref, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ValueError):
            dist.log_pdf(dist.unit_gaussian(3), np.zeros(4))


def _fd_score(den, x, step=1e-6):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x); e[j] = step
        g[j] = (dist.log_pdf(den, x + e) - dist.log_pdf(den, x - e)) / (2 * step)
    return g


class TestScore:
    @pytest.mark.parametrize("make", [
        lambda rng: dist.gaussian_density(rng.normal(size=3),
                                          dist.make_covariance(3, rng)),
        lambda rng: dist.cauchy_density(3, scale=1.5),
        lambda rng: dist.laplace_density(3, loc=0.2, b=0.8),
    ])
    def test_matches_finite_difference(self, make):
        rng = np.random.default_rng(0)
        den = make(rng)
        for seed in range(5):
            x = np.random.default_rng(seed).normal(size=3)
            assert np.allclose(dist.score(den, x), _fd_score(den, x),
                               rtol=1e-4, atol=1e-6)

    def test_log_normal_finite_difference(self):
        rng = np.random.default_rng(4)
        den = dist.log_normal_density(rng.normal(size=3) * 0.1,
                                      dist.make_covariance(3, rng))
        for seed in range(5):
            x = np.exp(np.random.default_rng(seed).normal(size=3) * 0.3)
            assert np.allclose(dist.score(den, x), _fd_score(den, x, 1e-7),
                               rtol=1e-4, atol=1e-5)

    def test_gaussian_closed_form(self):
        den = dist.unit_gaussian(4)
        x = np.array([1.0, -2.0, 0.5, 0.0])
        assert np.allclose(dist.score(den, x), -x, atol=1e-15)

    def test_batch_matches_loop(self):
        rng = np.random.default_rng(7)
        den = dist.gaussian_density(rng.normal(size=4), dist.make_covariance(4, rng))
        xs = rng.normal(size=(6, 4))
        batch = dist.score(den, xs)
        assert batch.shape == (6, 4)
        for i in range(6):
            assert np.allclose(batch[i], dist.score(den, xs[i]), atol=1e-14)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_cauchy_score_points_inward(self, seed):
        den = dist.cauchy_density(5)
        x = np.random.default_rng(seed).normal(size=5) * 3
        s = dist.score(den, x)
        if np.linalg.norm(x) > 1e-9:
            assert float(s @ x) < 0


class TestJaxParity:
    @pytest.mark.parametrize("make", [
        lambda: dist.gaussian_density(np.array([0.2, -0.4]),
                                      dist.make_covariance(2, np.random.default_rng(0))),
        lambda: dist.cauchy_density(2, scale=0.7),
        lambda: dist.laplace_density(2, loc=-0.1, b=1.2),
    ])
    def test_log_pdf_and_score(self, make):
        den = make()
        ll_fn = dist.jax_log_pdf_fn(den)
        s_fn = dist.jax_score_fn(den)
        x = np.array([0.9, -1.3])
        assert np.isclose(float(ll_fn(x)), dist.log_pdf(den, x), atol=1e-12)
        assert np.allclose(np.asarray(s_fn(x)), dist.score(den, x), atol=1e-12)

    def test_log_normal(self):
        den = dist.log_normal_density(np.zeros(3),
                                      dist.make_covariance(3, np.random.default_rng(1)))
        x = np.array([0.5, 1.5, 2.0])
        assert np.isclose(float(dist.jax_log_pdf_fn(den)(x)),
                          dist.log_pdf(den, x), atol=1e-12)
        assert np.allclose(np.asarray(dist.jax_score_fn(den)(x)),
                           dist.score(den, x), atol=1e-12)

    def test_jax_score_is_grad_of_jax_log_pdf(self):
        import jax
        den = dist.cauchy_density(4, scale=1.3)
        x = np.array([0.3, -0.8, 1.1, 0.0])
        g = np.asarray(jax.grad(dist.jax_log_pdf_fn(den))(x))
        assert np.allclose(g, np.asarray(dist.jax_score_fn(den)(x)), atol=1e-12)


class TestSampling:
    def test_gaussian_moments(self):
        rng = np.random.default_rng(0)
        cov = dist.make_covariance(4, rng)
        mean = np.array([1.0, -0.5, 0.0, 2.0])
        xs = dist.sample(dist.gaussian_density(mean, cov), 200_000, rng)
        assert np.allclose(xs.mean(axis=0), mean, atol=0.02)
        assert np.allclose(np.cov(xs.T), cov.sigma, atol=0.03)

    def test_log_normal_log_moments(self):
        rng = np.random.default_rng(1)
        cov = dist.make_covariance(3, rng)
        xs = dist.sample(dist.log_normal_density(np.zeros(3), cov), 200_000, rng)
        assert np.all(xs > 0)
        logs = np.log(xs)
        assert np.allclose(logs.mean(axis=0), 0.0, atol=0.02)
        assert np.allclose(np.cov(logs.T), cov.sigma, atol=0.03)

    def test_laplace_moments(self):
        rng = np.random.default_rng(2)
        xs = dist.sample(dist.laplace_density(2, loc=0.5, b=1.5), 200_000, rng)
        assert np.allclose(xs.mean(axis=0), 0.5, atol=0.03)
        # Var = 2 b^2
        assert np.allclose(xs.var(axis=0), 2 * 1.5**2, rtol=0.03)

    def test_cauchy_median_and_tail(self):
        rng = np.random.default_rng(3)
        xs = dist.sample(dist.cauchy_density(1, scale=2.0), 400_000, rng)
        # 1-d marginal of the elliptical family is Cauchy(0, gamma):
        # quartiles at +-gamma
        assert np.isclose(np.median(xs), 0.0, atol=0.02)
        assert np.isclose(np.quantile(xs, 0.75), 2.0, atol=0.05)

    def test_cauchy_not_product_form(self):
        # coordinates of one elliptical draw share a chi^2 divisor, so
        # |x_1| and |x_2| are positively associated, unlike a product form
        rng = np.random.default_rng(4)
        xs = dist.sample(dist.cauchy_density(2), 100_000, rng)
        r = np.corrcoef(np.log(np.abs(xs[:, 0]) + 1e-12),
                        np.log(np.abs(xs[:, 1]) + 1e-12))[0, 1]
        assert r > 0.1

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            dist.sample(dist.unit_gaussian(2), 0, np.random.default_rng(0))


class TestNormalization:
    """Quadrature checks that log_pdf integrates to one."""

    def test_1d_families(self):
        for den in (dist.gaussian_density(np.array([0.3]), dist.isotropic_spec(1, 2.0)),
                    dist.cauchy_density(1, scale=1.5),
                    dist.laplace_density(1, loc=0.1, b=0.7)):
            total, _ = integrate.quad(
                lambda x: math.exp(dist.log_pdf(den, np.array([x]))),
                -np.inf, np.inf)
            assert np.isclose(total, 1.0, atol=1e-8)

    def test_log_normal_1d(self):
        den = dist.log_normal_density(np.array([0.2]), dist.isotropic_spec(1, 0.5))
        total, _ = integrate.quad(
            lambda x: math.exp(dist.log_pdf(den, np.array([x]))), 0, np.inf)
        assert np.isclose(total, 1.0, atol=1e-8)

    @pytest.mark.parametrize("d", [2, 3, 5])
    def test_cauchy_radial_quadrature(self, d):
        # integrate the elliptical density over R^d in spherical shells;
        # validates the gamma^d normalization in the constant
        g = 1.7
        den = dist.cauchy_density(d, scale=g)
        sphere = 2 * math.pi ** (d / 2) / math.exp(gammaln(d / 2))

        def shell(r):
            e = np.zeros(d); e[0] = r
            return sphere * r ** (d - 1) * math.exp(dist.log_pdf(den, e))

        total, _ = integrate.quad(shell, 0, np.inf)
        assert np.isclose(total, 1.0, atol=1e-7)
