"""Mixture oracle checks against independent references.

The references never share code with the implementation: extended-precision
direct summation (mpmath) for densities, central finite differences for
scores, and explicit Bayes arithmetic for posteriors.
"""

import mpmath
import numpy as np
import pytest

from scoreflow.errors import DomainError, EmptySelectionError
from scoreflow.oracle import (
    IsotropicGMM,
    conditional_restrict,
    gmm_component_posterior,
    gmm_denoise,
    gmm_log_density,
    gmm_sample,
    gmm_score,
    make_gmm,
    perturb,
)

LOG_STD_NORMAL_AT_MODE = -0.9189385332046727  # log(1/sqrt(2*pi))


def random_gmm(rng, dim=2, k=3, dirac=False):
    w = rng.uniform(0.2, 1.0, k)
    stds = np.zeros(k) if dirac else rng.uniform(0.1, 1.5, k)
    return IsotropicGMM(
        dim=dim,
        weights=w / w.sum(),
        means=rng.normal(0.0, 2.0, (k, dim)),
        stds=stds,
    )


def mp_log_density(gmm, x, sigma):
    """Direct mixture summation at 50 decimal digits."""
    with mpmath.workdps(50):
        total = mpmath.mpf(0)
        for w, mu, std in zip(gmm.weights, gmm.means, gmm.stds):
            var = mpmath.mpf(float(std)) ** 2 + mpmath.mpf(float(sigma)) ** 2
            sq = sum((mpmath.mpf(float(a)) - mpmath.mpf(float(b))) ** 2
                     for a, b in zip(x, mu))
            norm = (2 * mpmath.pi * var) ** (mpmath.mpf(gmm.dim) / 2)
            total += mpmath.mpf(float(w)) * mpmath.exp(-sq / (2 * var)) / norm
        return float(mpmath.log(total))


class TestLogDensity:
    def test_standard_normal_at_mode(self):
        gmm = make_gmm([(1.0, [0.0], 1.0)])
        assert gmm_log_density(gmm, [0.0], 0.0) == pytest.approx(
            LOG_STD_NORMAL_AT_MODE, abs=1e-14
        )

    def test_perturbed_dirac_is_normal(self):
        gmm = make_gmm([(1.0, [0.0], 0.0)])
        assert gmm_log_density(gmm, [0.0], 1.0) == pytest.approx(
            LOG_STD_NORMAL_AT_MODE, abs=1e-14
        )

    def test_matches_extended_precision_sum(self):
        rng = np.random.default_rng(7)
        gmm = random_gmm(rng)
        for _ in range(20):
            x = rng.normal(0.0, 3.0, 2)
            got = gmm_log_density(gmm, x, 0.7)
            want = mp_log_density(gmm, x, 0.7)
            assert got == pytest.approx(want, rel=1e-12)

    def test_no_underflow_far_in_tail(self):
        gmm = make_gmm([(1.0, [0.0], 1.0)])
        # ~ -5e5 in log units; a naive exp() would underflow to -inf
        val = gmm_log_density(gmm, [1000.0], 0.0)
        assert np.isfinite(val)
        assert val == pytest.approx(-0.5 * 1000.0**2 + LOG_STD_NORMAL_AT_MODE, rel=1e-12)

    def test_dirac_at_sigma_zero_rejected(self):
        gmm = make_gmm([(1.0, [0.0], 0.0)])
        with pytest.raises(DomainError):
            gmm_log_density(gmm, [0.0], 0.0)

    def test_dimension_mismatch_rejected(self):
        gmm = make_gmm([(1.0, [0.0, 0.0], 1.0)])
        with pytest.raises(DomainError):
            gmm_log_density(gmm, [0.0], 1.0)


class TestScore:
    def test_single_dirac_closed_form(self):
        mu = np.array([0.3, -1.2])
        gmm = make_gmm([(1.0, mu, 0.0)])
        rng = np.random.default_rng(0)
        for sigma in (0.05, 1.0, 20.0):
            x = rng.normal(size=2)
            np.testing.assert_allclose(
                gmm_score(gmm, x, sigma), (mu - x) / sigma**2, rtol=1e-13
            )

    def test_symmetric_diracs_zero_at_center(self):
        gmm = make_gmm([(0.5, [1.0], 0.0), (0.5, [-1.0], 0.0)])
        np.testing.assert_allclose(gmm_score(gmm, [0.0], 1.0), [0.0], atol=1e-15)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        gmm = random_gmm(rng)
        h = 1e-5
        worst = 0.0
        for _ in range(100):
            x = rng.normal(0.0, 2.5, 2)
            sigma = float(np.exp(rng.uniform(np.log(2e-3), np.log(80.0))))
            got = gmm_score(gmm, x, sigma)
            fd = np.empty(2)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                fd[j] = (
                    gmm_log_density(gmm, x + e, sigma)
                    - gmm_log_density(gmm, x - e, sigma)
                ) / (2 * h)
            scale = max(np.linalg.norm(fd), 1e-12)
            worst = max(worst, np.linalg.norm(got - fd) / scale)
        assert worst < 1e-4


class TestDenoise:
    def test_single_dirac_returns_center(self):
        mu = np.array([2.0, -0.5])
        gmm = make_gmm([(1.0, mu, 0.0)])
        rng = np.random.default_rng(1)
        for sigma in (0.01, 1.0, 80.0):
            np.testing.assert_allclose(
                gmm_denoise(gmm, rng.normal(size=2), sigma), mu, atol=1e-10
            )

    def test_symmetry_midpoint(self):
        gmm = make_gmm([(0.5, [1.0], 0.0), (0.5, [-1.0], 0.0)])
        for sigma in (0.3, 1.0, 10.0):
            np.testing.assert_allclose(gmm_denoise(gmm, [0.0], sigma), [0.0], atol=1e-15)

    def test_identity_with_score(self):
        rng = np.random.default_rng(3)
        gmm = random_gmm(rng)
        for _ in range(50):
            x = rng.normal(0.0, 2.0, 2)
            sigma = float(np.exp(rng.uniform(np.log(2e-3), np.log(80.0))))
            lhs = gmm_denoise(gmm, x, sigma)
            rhs = x + sigma**2 * gmm_score(gmm, x, sigma)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)

    def test_sigma_zero_passthrough(self):
        gmm = make_gmm([(1.0, [0.0, 0.0], 1.0)])
        x = np.array([0.4, -0.7])
        np.testing.assert_array_equal(gmm_denoise(gmm, x, 0.0), x)


class TestComponentPosterior:
    def test_single_component(self):
        gmm = make_gmm([(1.0, [0.0], 1.0)])
        np.testing.assert_allclose(gmm_component_posterior(gmm, [0.5], 1.0), [1.0])

    def test_equidistant_symmetric(self):
        gmm = make_gmm([(0.5, [1.0, 0.0], 0.2), (0.5, [-1.0, 0.0], 0.2)])
        post = gmm_component_posterior(gmm, [0.0, 3.0], 0.7)
        np.testing.assert_allclose(post, [0.5, 0.5], atol=1e-14)

    def test_matches_direct_bayes(self):
        rng = np.random.default_rng(5)
        gmm = random_gmm(rng)
        for _ in range(30):
            x = rng.normal(0.0, 2.0, 2)
            sigma = float(rng.uniform(0.05, 5.0))
            direct = np.array([
                w * np.exp(
                    -np.sum((x - mu) ** 2) / (2 * (s**2 + sigma**2))
                ) / (2 * np.pi * (s**2 + sigma**2))
                for w, mu, s in zip(gmm.weights, gmm.means, gmm.stds)
            ])
            direct /= direct.sum()
            got = gmm_component_posterior(gmm, x, sigma)
            np.testing.assert_allclose(got, direct, atol=1e-12)

    def test_simplex_property(self):
        rng = np.random.default_rng(9)
        gmm = random_gmm(rng, k=4)
        xs = rng.normal(0.0, 3.0, (200, 2))
        post = gmm_component_posterior(gmm, xs, 0.5)
        assert np.all(post >= 0)
        np.testing.assert_allclose(post.sum(axis=-1), 1.0, atol=1e-12)


class TestConditionalRestrict:
    def test_restrict_to_single(self):
        gmm = make_gmm([(0.5, [1.0], 0.1), (0.5, [-1.0], 0.1)])
        sub = conditional_restrict(gmm, [0])
        assert sub.n_components == 1
        np.testing.assert_allclose(sub.weights, [1.0])
        np.testing.assert_allclose(sub.means, [[1.0]])

    def test_restrict_to_all_is_identity(self):
        rng = np.random.default_rng(2)
        gmm = random_gmm(rng)
        sub = conditional_restrict(gmm, [0, 1, 2])
        np.testing.assert_allclose(sub.weights, gmm.weights)
        np.testing.assert_allclose(sub.means, gmm.means)

    def test_renormalization(self):
        gmm = make_gmm([(0.2, [0.0], 1.0), (0.3, [1.0], 1.0), (0.5, [2.0], 1.0)])
        sub = conditional_restrict(gmm, [1, 2])
        np.testing.assert_allclose(sub.weights, [0.375, 0.625], atol=1e-15)

    def test_empty_selection(self):
        gmm = make_gmm([(1.0, [0.0], 1.0)])
        with pytest.raises(EmptySelectionError):
            conditional_restrict(gmm, [])


class TestBayesScoreIdentity:
    def test_full_score_plus_posterior_grad_equals_conditional(self):
        # grad log p(k|x) computed by finite differences of the posterior,
        # compared against (conditional score - marginal score).
        rng = np.random.default_rng(21)
        gmm = random_gmm(rng, k=3)
        h = 1e-6
        for _ in range(100):
            x = rng.normal(0.0, 2.0, 2)
            sigma = float(rng.uniform(0.1, 5.0))
            k = int(rng.integers(0, 3))
            cond = conditional_restrict(gmm, [k])
            grad_post = np.empty(2)
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                lo = np.log(gmm_component_posterior(gmm, x - e, sigma)[k])
                hi = np.log(gmm_component_posterior(gmm, x + e, sigma)[k])
                grad_post[j] = (hi - lo) / (2 * h)
            lhs = gmm_score(gmm, x, sigma) + grad_post
            rhs = gmm_score(cond, x, sigma)
            np.testing.assert_allclose(lhs, rhs, atol=1e-4)

    def test_analytic_form_of_identity(self):
        # Same identity with both sides analytic, at the tight tolerance.
        rng = np.random.default_rng(22)
        gmm = random_gmm(rng, k=3)
        for _ in range(100):
            x = rng.normal(0.0, 2.0, 2)
            sigma = float(rng.uniform(0.1, 5.0))
            k = int(rng.integers(0, 3))
            cond = conditional_restrict(gmm, [k])
            grad_post = gmm_score(cond, x, sigma) - gmm_score(gmm, x, sigma)
            lhs = gmm_score(gmm, x, sigma) + grad_post
            np.testing.assert_allclose(lhs, gmm_score(cond, x, sigma), atol=1e-8)


class TestSampling:
    def test_dirac_samples_constant(self):
        mu = np.array([1.5, -2.0])
        gmm = make_gmm([(1.0, mu, 0.0)])
        x = gmm_sample(gmm, np.random.default_rng(0), 100)
        np.testing.assert_array_equal(x, np.tile(mu, (100, 1)))

    def test_standard_normal_moments(self):
        gmm = make_gmm([(1.0, [0.0], 1.0)])
        x = gmm_sample(gmm, np.random.default_rng(42), 100_000)
        assert abs(x.mean()) < 0.02
        assert abs(x.var() - 1.0) < 0.03

    def test_seed_determinism(self):
        rng_a = np.random.default_rng(123)
        rng_b = np.random.default_rng(123)
        gmm = make_gmm([(0.5, [0.0, 0.0], 1.0), (0.5, [3.0, 3.0], 0.5)])
        np.testing.assert_array_equal(
            gmm_sample(gmm, rng_a, 1000), gmm_sample(gmm, rng_b, 1000)
        )

    def test_labels_match_components(self):
        gmm = make_gmm([(0.5, [-5.0], 0.01), (0.5, [5.0], 0.01)])
        x, labels = gmm_sample(gmm, np.random.default_rng(1), 500, return_labels=True)
        np.testing.assert_array_equal(labels, (x[:, 0] > 0).astype(labels.dtype))


class TestPerturb:
    def test_sigma_zero_identity(self):
        x0 = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(perturb(x0, 0.0, np.random.default_rng(0)), x0)

    def test_moment(self):
        rng = np.random.default_rng(8)
        out = perturb(np.zeros((100_000, 1)), 2.0, rng)
        assert abs(out.std() - 2.0) / 2.0 < 0.02

    def test_seed_determinism(self):
        x0 = np.ones((10, 2))
        a = perturb(x0, 1.3, np.random.default_rng(77))
        b = perturb(x0, 1.3, np.random.default_rng(77))
        np.testing.assert_array_equal(a, b)


class TestValidation:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(DomainError):
            make_gmm([(0.5, [0.0], 1.0), (0.4, [1.0], 1.0)])

    def test_negative_std_rejected(self):
        with pytest.raises(DomainError):
            make_gmm([(1.0, [0.0], -0.1)])

    def test_empty_mixture_rejected(self):
        with pytest.raises(DomainError):
            IsotropicGMM(dim=1, weights=np.array([]), means=np.empty((0, 1)),
                         stds=np.array([]))
