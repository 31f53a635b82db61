"""Tests for Gaussian-mixture score models and their derivatives."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from cmi_dps.diffusion.operators import DenseOperator, NoiseModel
from cmi_dps.diffusion.oracles import (
    GaussianDist,
    conjugate_gaussian_posterior,
    finite_diff_grad,
    finite_diff_jacobian,
)
from cmi_dps.diffusion.schedule import build_schedule
from cmi_dps.diffusion.score_models import (
    GaussianMixturePrior,
    GaussianMixtureScore,
    ScoreFunction,
    dense_third_tensor,
    finite_diff_wrap,
    gmm_hessian,
    gmm_score,
    hvp,
    third_bilinear_grad,
    tweedie_denoise,
)
from cmi_dps.exceptions import (
    CapabilityError,
    ConfigurationError,
    DenseLimitError,
    FactorizationError,
    ShapeError,
)

# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _symmetric_pair(d: int = 2) -> GaussianMixturePrior:
    mu = np.linspace(0.5, 1.0, d)
    return GaussianMixturePrior(
        weights=np.array([0.5, 0.5]),
        means=np.stack([mu, -mu]),
        covariances=np.stack([np.eye(d), np.eye(d)]),
    )


def _hessian_form(model, t, u, v):
    return lambda x: float(u @ model.hessian(x, t) @ v)


# ---------------------------------------------------------------------------
# Prior
# ---------------------------------------------------------------------------


class TestGaussianMixturePrior:
    def test_standard_normal(self):
        prior = GaussianMixturePrior.standard_normal(3)
        assert prior.dimension == 3
        assert prior.n_components == 1

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigurationError, match="sum to 1"):
            GaussianMixturePrior(
                np.array([0.5, 0.4]), np.zeros((2, 2)), np.stack([np.eye(2)] * 2)
            )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            GaussianMixturePrior(np.ones(1), np.zeros((1, 2)), np.eye(3)[None])

    def test_non_pd_covariance(self):
        with pytest.raises(FactorizationError):
            GaussianMixturePrior.gaussian(np.zeros(2), np.diag([1.0, -1.0]))

    def test_sample_shape_and_moments(self):
        prior = GaussianMixturePrior.gaussian(np.array([1.0, -2.0]), 0.25 * np.eye(2))
        draws = prior.sample(np.random.default_rng(0), 20_000)
        assert draws.shape == (20_000, 2)
        np.testing.assert_allclose(draws.mean(axis=0), [1.0, -2.0], atol=0.02)
        np.testing.assert_allclose(draws.var(axis=0), [0.25, 0.25], rtol=0.05)

    def test_log_density_of_standard_normal(self):
        prior = GaussianMixturePrior.standard_normal(2)
        expected = -math.log(2.0 * math.pi) - 0.5 * 2.0
        assert prior.log_density(np.array([1.0, 1.0])) == pytest.approx(expected)


# ---------------------------------------------------------------------------
# Score and Hessian
# ---------------------------------------------------------------------------


class TestScore:
    def test_standard_normal_is_fixed_point(self, schedule):
        prior = GaussianMixturePrior.standard_normal(3)
        x = np.array([0.4, -1.1, 2.0])
        for t in (1, 5, 10):
            np.testing.assert_allclose(gmm_score(prior, schedule, x, t), -x)

    def test_symmetric_mixture_vanishes_at_origin(self, schedule):
        score = gmm_score(_symmetric_pair(), schedule, np.zeros(2), 4)
        np.testing.assert_allclose(score, 0.0, atol=1e-15)

    def test_matches_log_density_differences(self, gmm2):
        x = np.array([0.3, -0.1])
        reference = finite_diff_grad(lambda p: gmm2.log_density(p, 4), x, 1e-5)
        np.testing.assert_allclose(gmm2.score(x, 4), reference, rtol=1e-6, atol=1e-9)

    def test_batched_points(self, gmm2):
        xs = np.array([[0.3, -0.1], [1.0, 2.0]])
        batched = gmm2.score(xs, 3)
        assert batched.shape == (2, 2)
        np.testing.assert_allclose(batched[1], gmm2.score(xs[1], 3))

    def test_wrong_dimension(self, gmm2):
        with pytest.raises(ShapeError):
            gmm2.score(np.zeros(3), 1)


class TestHessian:
    def test_standard_normal(self, schedule):
        prior = GaussianMixturePrior.standard_normal(3)
        hess = gmm_hessian(prior, schedule, np.ones(3), 6)
        np.testing.assert_allclose(hess, -np.eye(3), atol=1e-14)

    def test_single_gaussian(self, schedule):
        cov = np.array([[0.5, 0.1], [0.1, 0.3]])
        prior = GaussianMixturePrior.gaussian(np.array([1.0, -1.0]), cov)
        a = schedule.alpha_bar(5)
        expected = -np.linalg.inv(a * cov + (1.0 - a) * np.eye(2))
        hess = gmm_hessian(prior, schedule, np.array([0.2, 0.7]), 5)
        np.testing.assert_allclose(hess, expected, atol=1e-12)

    def test_matches_score_differences(self, gmm2):
        x = np.array([0.1, 0.4])
        jacobian = finite_diff_jacobian(lambda p: gmm2.score(p, 5), x, 1e-5)
        np.testing.assert_allclose(gmm2.hessian(x, 5), jacobian, atol=1e-5)

    def test_symmetric(self, gmm4):
        hess = gmm4.hessian(np.array([0.2, 0.1, -0.1, 0.05]), 5)
        np.testing.assert_array_equal(hess, hess.T)


class TestHvp:
    def test_standard_normal(self, schedule):
        model = GaussianMixtureScore(GaussianMixturePrior.standard_normal(2), schedule)
        v = np.array([0.7, -0.3])
        np.testing.assert_allclose(hvp(model, np.ones(2), 3, v), -v, atol=1e-14)

    def test_zero_direction(self, gmm2):
        np.testing.assert_array_equal(hvp(gmm2, np.ones(2), 3, np.zeros(2)), 0.0)

    def test_matches_dense_hessian(self, gmm4):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(4)
        v = rng.standard_normal(4)
        np.testing.assert_allclose(
            gmm4.hvp(x, 4, v), gmm4.hessian(x, 4) @ v, atol=1e-12
        )

    def test_batched_directions(self, gmm4):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(4)
        vs = rng.standard_normal((5, 4))
        np.testing.assert_allclose(
            gmm4.hvp(x, 4, vs), vs @ gmm4.hessian(x, 4), atol=1e-12
        )


# ---------------------------------------------------------------------------
# Third derivative
# ---------------------------------------------------------------------------


class TestThirdOrder:
    def test_single_gaussian_vanishes(self, schedule):
        prior = GaussianMixturePrior.gaussian(np.array([1.0, 2.0]), np.eye(2) * 0.4)
        model = GaussianMixtureScore(prior, schedule)
        u, v = np.array([1.0, 0.5]), np.array([-0.3, 2.0])
        out = third_bilinear_grad(model, np.array([0.1, 0.1]), 5, u, v)
        np.testing.assert_allclose(out, 0.0, atol=1e-14)
        tensor = dense_third_tensor(model, np.array([0.1, 0.1]), 5)
        np.testing.assert_allclose(tensor, 0.0, atol=1e-14)

    def test_bilinear_in_zero_direction(self, gmm2):
        x, u = np.array([0.2, -0.4]), np.array([1.0, -1.0])
        np.testing.assert_allclose(
            gmm2.third_bilinear_grad(x, 3, u, np.zeros(2)), 0.0, atol=1e-15
        )
        np.testing.assert_allclose(
            gmm2.third_bilinear_grad(x, 3, np.zeros(2), u), 0.0, atol=1e-15
        )

    def test_matches_hessian_differences(self, schedule):
        prior = GaussianMixturePrior(
            weights=np.array([0.35, 0.65]),
            means=np.array([[0.8, -0.2, 0.4], [-0.6, 0.3, -0.5]]),
            covariances=np.stack([0.3 * np.eye(3), 0.2 * np.eye(3)]),
        )
        model = GaussianMixtureScore(prior, schedule)
        rng = np.random.default_rng(7)
        x, u, v = (rng.standard_normal(3) * 0.5 for _ in range(3))
        reference = finite_diff_grad(_hessian_form(model, 4, u, v), x, 1e-5)
        np.testing.assert_allclose(
            model.third_bilinear_grad(x, 4, u, v), reference, rtol=1e-5, atol=1e-8
        )

    def test_symmetric_in_directions(self, gmm4):
        rng = np.random.default_rng(8)
        x, u, v = (rng.standard_normal(4) for _ in range(3))
        np.testing.assert_allclose(
            gmm4.third_bilinear_grad(x, 5, u, v),
            gmm4.third_bilinear_grad(x, 5, v, u),
            atol=1e-12,
        )

    def test_dense_tensor_permutation_symmetry(self, gmm2):
        tensor = gmm2.dense_third_tensor(np.array([0.3, -0.2]), 4)
        for perm in itertools.permutations(range(3)):
            np.testing.assert_allclose(tensor, tensor.transpose(perm), atol=1e-12)

    def test_dense_tensor_matches_triple_differences(self, gmm2):
        x = np.array([0.3, -0.2])
        reference = finite_diff_jacobian(lambda p: gmm2.hessian(p, 4), x, 1e-5)
        np.testing.assert_allclose(
            gmm2.dense_third_tensor(x, 4), reference, atol=1e-4
        )

    def test_dense_tensor_agrees_with_contraction(self, gmm4):
        rng = np.random.default_rng(9)
        x, u, v = (rng.standard_normal(4) for _ in range(3))
        tensor = gmm4.dense_third_tensor(x, 5)
        np.testing.assert_allclose(
            np.einsum("a,b,abc->c", u, v, tensor),
            gmm4.third_bilinear_grad(x, 5, u, v),
            atol=1e-12,
        )

    def test_dense_limit(self, gmm4):
        with pytest.raises(DenseLimitError, match="cmi_grad_hutchinson"):
            gmm4.dense_third_tensor(np.zeros(4), 5, limit=3)

    def test_bare_score_has_no_third_order(self):
        model = ScoreFunction(lambda x, t: -x, dimension=2)
        with pytest.raises(CapabilityError):
            model.third_bilinear_grad(np.zeros(2), 1, np.ones(2), np.ones(2))
        with pytest.raises(CapabilityError, match="finite_diff_wrap"):
            model.hessian(np.zeros(2), 1)


# ---------------------------------------------------------------------------
# Tweedie
# ---------------------------------------------------------------------------


class TestTweedie:
    def test_standard_normal_scaling(self):
        s = build_schedule("linear", 1, 0.75, 0.75)
        model = GaussianMixtureScore(GaussianMixturePrior.standard_normal(2), s)
        out = tweedie_denoise(model, s, np.array([2.0, -2.0]), 1)
        np.testing.assert_allclose(out, [1.0, -1.0])

    def test_clean_limit(self):
        s = build_schedule("linear", 1, 1e-12, 1e-12)
        prior = GaussianMixturePrior.gaussian(np.ones(2), 0.5 * np.eye(2))
        x_t = np.array([0.4, -0.9])
        out = tweedie_denoise(GaussianMixtureScore(prior, s), s, x_t, 1)
        np.testing.assert_allclose(out, x_t, atol=1e-9)

    def test_matches_conjugate_posterior_mean(self, schedule):
        mu = np.array([1.0, -0.5])
        prior = GaussianMixturePrior.gaussian(mu, np.eye(2))
        model = GaussianMixtureScore(prior, schedule)
        t = 6
        a = schedule.alpha_bar(t)
        x_t = np.array([0.3, 0.8])
        A = DenseOperator(math.sqrt(a) * np.eye(2))
        noise = NoiseModel.isotropic(math.sqrt(1.0 - a), 2)
        prior_dist = GaussianDist(mu, np.eye(2))
        oracle = conjugate_gaussian_posterior(prior_dist, A, noise, x_t)
        out = tweedie_denoise(model, schedule, x_t, t)
        np.testing.assert_allclose(out, oracle.mean, atol=1e-10)


# ---------------------------------------------------------------------------
# Finite-difference wrapper
# ---------------------------------------------------------------------------


class TestFiniteDiffWrap:
    def test_hvp_matches_analytic(self, gmm2):
        wrapped = finite_diff_wrap(gmm2.score, h=1e-4, dimension=2)
        x, v = np.array([0.2, -0.3]), np.array([0.6, 0.8])
        np.testing.assert_allclose(wrapped.hvp(x, 4, v), gmm2.hvp(x, 4, v), atol=1e-5)

    def test_linear_score(self):
        wrapped = finite_diff_wrap(lambda x, t: -x)
        v = np.array([1.5, -0.5, 2.0])
        np.testing.assert_allclose(wrapped.hvp(np.ones(3), 1, v), -v, atol=1e-10)

    def test_third_order_vanishes_for_gaussian(self, schedule):
        model = GaussianMixtureScore(GaussianMixturePrior.standard_normal(2), schedule)
        wrapped = finite_diff_wrap(model.score, h=1e-4)
        out = wrapped.third_bilinear_grad(
            np.array([0.5, 0.1]), 3, np.array([1.0, 0.0]), np.array([0.3, 0.4])
        )
        np.testing.assert_allclose(out, 0.0, atol=1e-6)

    def test_third_order_matches_analytic(self, gmm2):
        wrapped = finite_diff_wrap(gmm2.score, h=1e-3)
        x, u, v = np.array([0.3, -0.2]), np.array([1.0, 0.5]), np.array([-0.4, 0.9])
        np.testing.assert_allclose(
            wrapped.third_bilinear_grad(x, 4, u, v),
            gmm2.third_bilinear_grad(x, 4, u, v),
            atol=1e-4,
        )

    def test_dense_hessian_from_hvp(self, gmm2):
        wrapped = finite_diff_wrap(gmm2.score, h=1e-4)
        x = np.array([0.1, 0.1])
        np.testing.assert_allclose(wrapped.hessian(x, 2), gmm2.hessian(x, 2), atol=1e-6)

    def test_nonpositive_step(self):
        with pytest.raises(ConfigurationError):
            finite_diff_wrap(lambda x, t: -x, h=0.0)
