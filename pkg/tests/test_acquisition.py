"""Mean-based UCB scoring and its probabilistic reparameterization."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptsel.acquisition import (
    AcquisitionConfig,
    PrConfig,
    PrState,
    alpha_from_vector,
    argmax_mucb,
    candidate_stats,
    candidate_stats_batch,
    default_beta,
    default_gamma,
    mucb,
    mucb_values,
    pr_gradient_estimate,
    pr_prob,
    pr_sample_candidate,
    pr_sga_optimize,
)
from promptsel.posterior import PosteriorSampleSet
from promptsel.surrogate import IdentityFeatures, SurrogateSpec


def _blr(dim):
    return SurrogateSpec(kind="blr", feature_map=IdentityFeatures(dim))


class TestSchedules:
    def test_beta_values(self):
        assert default_beta(0) == 0.0
        assert default_beta(1) == 0.0
        assert default_beta(2) == pytest.approx(math.sqrt(2 * math.log(2)))
        assert default_beta(100) == pytest.approx(math.sqrt(2 * math.log(100)))

    def test_beta_is_nondecreasing(self):
        values = [default_beta(t) for t in range(0, 50)]
        assert all(b <= a for b, a in zip(values, values[1:]))

    def test_gamma_values(self):
        assert default_gamma(0) == 4.0
        assert default_gamma(1) == 2.0
        assert default_gamma(4) == 1.0
        assert default_gamma(100) == pytest.approx(0.2)

    def test_gamma_rejects_negative_counts(self):
        with pytest.raises(ValueError):
            default_gamma(-1)

    @given(st.integers(1, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_gamma_decreases_with_count(self, r):
        assert default_gamma(r + 1) < default_gamma(r) <= default_gamma(0)


class TestCandidateStats:
    def test_mean_and_unbiased_std_by_hand(self):
        """Weights {0, 2} on the identity at z = 1 give f in {0, 2}:
        mean 1, std sqrt(2) with the K-1 denominator."""
        samples = PosteriorSampleSet(np.array([[0.0], [2.0]]), provenance="exact")
        mu, sigma = candidate_stats(samples, _blr(1), np.array([1.0]))
        assert mu == pytest.approx(1.0)
        assert sigma == pytest.approx(math.sqrt(2.0))

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(42)
        spec = _blr(3)
        samples = PosteriorSampleSet(rng.standard_normal((20, 3)), provenance="exact")
        zs = rng.standard_normal((5, 3))
        mus, sigmas = candidate_stats_batch(samples, spec, zs)
        for n in range(5):
            mu, sigma = candidate_stats(samples, spec, zs[n])
            assert mus[n] == pytest.approx(mu)
            assert sigmas[n] == pytest.approx(sigma)

    def test_constant_posterior_has_zero_spread(self):
        samples = PosteriorSampleSet(np.ones((10, 2)), provenance="exact")
        _, sigma = candidate_stats(samples, _blr(2), np.array([0.5, 0.5]))
        assert sigma == 0.0


class TestMucb:
    def test_formula_by_hand(self):
        # 1 + 2 * (1 + 1) = 5
        assert mucb(1.0, 1.0, 2.0, 1.0) == 5.0
        # beta = 0 ignores both spread and count bonus
        assert mucb(3.0, 100.0, 0.0, 100.0) == 3.0

    def test_values_combine_schedule_and_counts(self):
        mus = np.array([0.0, 0.0])
        sigmas = np.array([1.0, 1.0])
        counts = np.array([1, 4])
        cfg = AcquisitionConfig()
        values = mucb_values(mus, sigmas, counts, cfg, t=2)
        beta = math.sqrt(2 * math.log(2))
        np.testing.assert_allclose(values, [beta * 3.0, beta * 2.0])

    def test_never_evaluated_candidates_get_the_largest_bonus(self):
        mus = np.zeros(3)
        sigmas = np.zeros(3)
        counts = np.array([5, 0, 5])
        assert argmax_mucb(mus, sigmas, counts, AcquisitionConfig(), t=10) == 2

    def test_argmax_is_one_based_and_breaks_ties_low(self):
        mus = np.array([1.0, 2.0, 2.0])
        sigmas = np.zeros(3)
        counts = np.ones(3, dtype=int)
        assert argmax_mucb(mus, sigmas, counts, AcquisitionConfig(), t=1) == 2

    def test_at_t1_pure_exploitation(self):
        """beta_1 = 0: only the posterior mean matters."""
        mus = np.array([0.3, -0.1, 0.2])
        sigmas = np.array([0.0, 99.0, 99.0])
        counts = np.array([0, 0, 0])
        assert argmax_mucb(mus, sigmas, counts, AcquisitionConfig(), t=1) == 1


class TestPrState:
    def test_theta_clipped_into_the_box(self):
        state = PrState(np.array([0.0, 0.5, 7.0]), floor=1e-6)
        np.testing.assert_allclose(state.theta, [1e-6, 0.5, 1.0])

    def test_probabilities_normalize(self):
        state = PrState(np.array([0.2, 0.6, 0.2]))
        probs = pr_prob(state)
        np.testing.assert_allclose(probs, [0.2, 0.6, 0.2])
        assert probs.sum() == pytest.approx(1.0)

    def test_zero_sum_guard(self):
        state = PrState(np.ones(2))
        state.theta = np.zeros(2)  # bypass construction-time clipping
        with pytest.raises(ValueError, match="positive sum"):
            pr_prob(state)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PrConfig(n_starts=0)
        with pytest.raises(ValueError):
            PrConfig(theta_floor=0.0)


class TestReinforceGradient:
    def test_expectation_matches_the_analytic_gradient(self):
        """N=2, theta=(1,1): the exact gradient of E[alpha] in coordinate 1 is
        (alpha_1 - alpha_2) / 4; the REINFORCE estimator must be unbiased."""
        alpha = np.array([2.0, 0.5])
        state = PrState(np.array([1.0, 1.0]))
        rng = np.random.default_rng(42)
        batches = np.stack([
            pr_gradient_estimate(state, alpha_from_vector(alpha), 256, rng)
            for _ in range(400)
        ])
        exact = np.array([(alpha[0] - alpha[1]) / 4.0, (alpha[1] - alpha[0]) / 4.0])
        se = batches.std(axis=0, ddof=1) / math.sqrt(len(batches))
        np.testing.assert_array_less(np.abs(batches.mean(axis=0) - exact), 3 * se + 1e-12)

    def test_constant_alpha_gives_zero_expected_gradient(self):
        """p_j / theta_j = 1 / sum(theta) for every j, so a flat alpha cancels
        exactly in expectation regardless of theta."""
        state = PrState(np.array([0.3, 0.9, 0.5]))
        rng = np.random.default_rng(1)
        batches = np.stack([
            pr_gradient_estimate(state, alpha_from_vector(np.full(3, 1.7)), 512, rng)
            for _ in range(200)
        ])
        se = batches.std(axis=0, ddof=1) / math.sqrt(len(batches))
        np.testing.assert_array_less(np.abs(batches.mean(axis=0)), 3 * se + 1e-9)

    def test_estimate_shape_and_validation(self):
        state = PrState(np.ones(4))
        grad = pr_gradient_estimate(state, alpha_from_vector(np.arange(4.0)), 16,
                                    np.random.default_rng(0))
        assert grad.shape == (4,)
        with pytest.raises(ValueError):
            pr_gradient_estimate(state, alpha_from_vector(np.ones(4)), 0,
                                 np.random.default_rng(0))

    def test_noisy_alpha_sampler_is_supported(self):
        """alpha may be a fresh posterior draw per sample; the estimator only
        needs its conditional mean."""
        rng = np.random.default_rng(3)

        def noisy(idx):
            return np.where(idx == 0, 1.0, 0.0) + 0.01 * rng.standard_normal(len(idx))

        state = PrState(np.array([1.0, 1.0]))
        batches = np.stack([
            pr_gradient_estimate(state, noisy, 256, rng) for _ in range(300)
        ])
        exact = np.array([0.25, -0.25])
        se = batches.std(axis=0, ddof=1) / math.sqrt(len(batches))
        np.testing.assert_array_less(np.abs(batches.mean(axis=0) - exact), 3 * se + 1e-12)


class TestSgaOptimize:
    def test_mass_concentrates_on_the_best_candidate(self):
        alpha = np.array([0.1, 0.9, 0.3, 0.2])
        cfg = PrConfig(n_starts=4, n_iterations=300, n_samples=64)
        state = pr_sga_optimize(alpha_from_vector(alpha), 4, cfg, np.random.default_rng(42))
        probs = pr_prob(state)
        assert int(np.argmax(probs)) == 1
        assert probs[1] > 0.9

    def test_iterates_respect_the_box(self):
        alpha = np.array([100.0, -100.0])
        cfg = PrConfig(n_starts=2, n_iterations=50, n_samples=32)
        state = pr_sga_optimize(alpha_from_vector(alpha), 2, cfg, np.random.default_rng(0))
        assert np.all(state.theta >= cfg.theta_floor)
        assert np.all(state.theta <= 1.0)

    def test_deterministic_given_rng(self):
        alpha = np.array([0.0, 1.0, 0.5])
        cfg = PrConfig(n_starts=2, n_iterations=40, n_samples=16)
        a = pr_sga_optimize(alpha_from_vector(alpha), 3, cfg, np.random.default_rng(5))
        b = pr_sga_optimize(alpha_from_vector(alpha), 3, cfg, np.random.default_rng(5))
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_single_candidate_is_trivial(self):
        cfg = PrConfig(n_starts=1, n_iterations=5, n_samples=8)
        state = pr_sga_optimize(alpha_from_vector(np.array([1.0])), 1, cfg,
                                np.random.default_rng(0))
        np.testing.assert_allclose(pr_prob(state), [1.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            pr_sga_optimize(alpha_from_vector(np.ones(1)), 0, PrConfig(),
                            np.random.default_rng(0))


class TestSampling:
    def test_draw_frequencies_match_probabilities(self):
        state = PrState(np.array([0.6, 0.2, 0.2]))
        rng = np.random.default_rng(42)
        n = 30_000
        draws = np.array([pr_sample_candidate(state, rng) for _ in range(n)])
        assert draws.min() >= 1 and draws.max() <= 3
        probs = pr_prob(state)
        for i in range(3):
            p_hat = np.mean(draws == i + 1)
            se = math.sqrt(probs[i] * (1 - probs[i]) / n)
            assert abs(p_hat - probs[i]) < 3 * se
