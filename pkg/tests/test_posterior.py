"""Posterior sampling: exact Gaussian draws, HMC, and variational inference."""

import math

import numpy as np
import pytest

from promptsel.posterior import (
    HmcConfig,
    PosteriorSampleSet,
    ViState,
    exact_gaussian_sample,
    hmc_sample,
    leapfrog,
    vi_fit,
    vi_sample,
)
from promptsel.surrogate import GaussianPosterior


def _std_normal(dim):
    logp = lambda q: -0.5 * float(q @ q)
    grad = lambda q: -q
    return logp, grad


class TestExactSampling:
    def test_moments_match_the_posterior(self):
        post = GaussianPosterior(mean=np.array([1.0, -2.0]),
                                 covariance=np.array([[2.0, 0.6], [0.6, 1.0]]))
        draws = exact_gaussian_sample(post, 50_000, np.random.default_rng(42))
        assert draws.provenance == "exact"
        np.testing.assert_allclose(draws.samples.mean(axis=0), post.mean, atol=0.03)
        np.testing.assert_allclose(np.cov(draws.samples, rowvar=False),
                                   post.covariance, atol=0.05)

    def test_zero_covariance_returns_the_mean(self):
        post = GaussianPosterior(mean=np.array([3.0]), covariance=np.array([[0.0]]))
        draws = exact_gaussian_sample(post, 5, np.random.default_rng(0))
        np.testing.assert_array_equal(draws.samples, 3.0)

    def test_deterministic_given_rng(self):
        post = GaussianPosterior(mean=np.zeros(3), covariance=np.eye(3))
        a = exact_gaussian_sample(post, 10, np.random.default_rng(7)).samples
        b = exact_gaussian_sample(post, 10, np.random.default_rng(7)).samples
        np.testing.assert_array_equal(a, b)

    def test_singular_covariance_gets_jitter(self):
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])  # rank 1
        post = GaussianPosterior(mean=np.zeros(2), covariance=cov)
        draws = exact_gaussian_sample(post, 1000, np.random.default_rng(1))
        # all mass on the diagonal direction
        np.testing.assert_allclose(draws.samples[:, 0], draws.samples[:, 1], atol=1e-3)

    def test_sample_set_validation(self):
        with pytest.raises(ValueError, match="K >= 2"):
            PosteriorSampleSet(np.zeros((1, 3)), provenance="exact")
        with pytest.raises(ValueError, match="provenance"):
            PosteriorSampleSet(np.zeros((3, 2)), provenance="dreams")


class TestLeapfrog:
    def test_reversibility(self):
        """Integrate forward, flip the momentum, integrate back: recover the
        start to float roundoff."""
        rng = np.random.default_rng(42)
        _, grad = _std_normal(4)
        q0 = rng.standard_normal(4)
        p0 = rng.standard_normal(4)
        q1, p1 = leapfrog(grad, q0, p0, step_size=0.1, n_steps=25)
        q2, p2 = leapfrog(grad, q1, -p1, step_size=0.1, n_steps=25)
        np.testing.assert_allclose(q2, q0, atol=1e-8)
        np.testing.assert_allclose(p2, -p0, atol=1e-8)

    def test_energy_error_shrinks_quadratically_with_step_size(self):
        _, grad = _std_normal(2)
        q0 = np.array([1.0, -0.5])
        p0 = np.array([0.3, 0.8])

        def energy_error(eps):
            n = int(round(1.0 / eps))
            q1, p1 = leapfrog(grad, q0, p0, eps, n)
            h = lambda q, p: 0.5 * float(q @ q) + 0.5 * float(p @ p)
            return abs(h(q1, p1) - h(q0, p0))

        e_coarse = energy_error(0.2)
        e_fine = energy_error(0.02)
        assert e_fine < e_coarse / 50  # ~quadratic: factor 100 expected

    def test_harmonic_oscillator_tracks_the_exact_flow(self):
        """For U(q) = q^2/2 the dynamics is rotation: q(t) = q0 cos t + p0 sin t."""
        _, grad = _std_normal(1)
        q, p = leapfrog(grad, np.array([1.0]), np.array([0.0]),
                        step_size=0.001, n_steps=1571)  # t ~ pi/2
        np.testing.assert_allclose(q, [0.0], atol=1e-3)
        np.testing.assert_allclose(p, [-1.0], atol=1e-3)

    def test_mass_rescales_velocities(self):
        _, grad = _std_normal(1)
        q_light, _ = leapfrog(grad, np.zeros(1), np.ones(1), 0.01, 10, mass=1.0)
        q_heavy, _ = leapfrog(grad, np.zeros(1), np.ones(1), 0.01, 10, mass=4.0)
        assert abs(q_heavy[0]) < abs(q_light[0])


class TestHmc:
    def test_standard_normal_moments(self):
        logp, grad = _std_normal(3)
        cfg = HmcConfig(step_size=0.2, leapfrog_steps=10, burn_in=300)
        draws, diag = hmc_sample(logp, grad, np.zeros(3), cfg, 20_000,
                                 np.random.default_rng(42))
        assert len(draws) == 20_000
        assert np.all(np.abs(draws.samples.mean(axis=0)) < 0.05)
        var = draws.samples.var(axis=0)
        assert np.all((0.9 < var) & (var < 1.1))
        assert 0.5 < diag.post_burnin_acceptance <= 1.0

    def test_tiny_step_accepts_everything(self):
        logp, grad = _std_normal(2)
        cfg = HmcConfig(step_size=1e-6, leapfrog_steps=3, burn_in=0, adapt=False)
        _, diag = hmc_sample(logp, grad, np.ones(2), cfg, 500, np.random.default_rng(0))
        assert diag.acceptance_rate > 0.999

    def test_rejection_advances_the_chain_with_a_duplicate(self):
        """A huge step size forces rejections; the chain must still produce k
        states, repeating the current one."""
        logp, grad = _std_normal(2)
        cfg = HmcConfig(step_size=50.0, leapfrog_steps=5, burn_in=0, adapt=False)
        draws, diag = hmc_sample(logp, grad, np.array([0.5, -0.5]), cfg, 50,
                                 np.random.default_rng(3))
        assert len(draws) == 50
        assert diag.acceptance_rate < 0.5
        repeats = np.sum(np.all(draws.samples[1:] == draws.samples[:-1], axis=1))
        assert repeats > 0

    def test_adaptation_moves_the_step_size_and_freezes_it(self):
        logp, grad = _std_normal(2)
        cfg = HmcConfig(step_size=1.0, leapfrog_steps=5, burn_in=200, adapt=True)
        _, diag = hmc_sample(logp, grad, np.zeros(2), cfg, 300, np.random.default_rng(11))
        assert diag.final_step_size != 1.0
        assert 0.55 < diag.post_burnin_acceptance <= 1.0

    def test_adapt_false_keeps_the_step_size(self):
        logp, grad = _std_normal(2)
        cfg = HmcConfig(step_size=0.15, leapfrog_steps=5, burn_in=50, adapt=False)
        _, diag = hmc_sample(logp, grad, np.zeros(2), cfg, 100, np.random.default_rng(0))
        assert diag.final_step_size == 0.15

    def test_correlated_gaussian_covariance_is_recovered(self):
        cov = np.array([[1.0, 0.8], [0.8, 1.0]])
        prec = np.linalg.inv(cov)
        logp = lambda q: -0.5 * float(q @ prec @ q)
        grad = lambda q: -prec @ q
        cfg = HmcConfig(step_size=0.15, leapfrog_steps=15, burn_in=500)
        draws, _ = hmc_sample(logp, grad, np.zeros(2), cfg, 20_000,
                              np.random.default_rng(5))
        np.testing.assert_allclose(np.cov(draws.samples, rowvar=False), cov, atol=0.1)

    def test_non_finite_density_raises(self):
        logp = lambda q: float("nan")
        grad = lambda q: -q
        with pytest.raises(RuntimeError, match="non-finite"):
            hmc_sample(logp, grad, np.zeros(1), HmcConfig(), 10, np.random.default_rng(0))

    def test_divergence_mid_chain_raises_with_context(self):
        # log density fine at 0 but gradient explodes the trajectory
        logp = lambda q: -0.5 * float(q @ q)
        grad = lambda q: q * 1e200  # wrong sign and enormous: blows up
        cfg = HmcConfig(step_size=1.0, leapfrog_steps=5, burn_in=0, adapt=False)
        with np.errstate(over="ignore"), pytest.raises(RuntimeError, match="iteration"):
            hmc_sample(logp, grad, np.ones(1), cfg, 5, np.random.default_rng(0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            HmcConfig(step_size=0.0)
        with pytest.raises(ValueError):
            HmcConfig(leapfrog_steps=0)
        with pytest.raises(ValueError):
            HmcConfig(burn_in=-1)

    def test_deterministic_given_rng(self):
        logp, grad = _std_normal(2)
        cfg = HmcConfig(step_size=0.2, leapfrog_steps=5, burn_in=20)
        a, _ = hmc_sample(logp, grad, np.zeros(2), cfg, 50, np.random.default_rng(9))
        b, _ = hmc_sample(logp, grad, np.zeros(2), cfg, 50, np.random.default_rng(9))
        np.testing.assert_array_equal(a.samples, b.samples)


class TestVariationalInference:
    def test_recovers_a_conjugate_gaussian_posterior(self):
        """Target N(1, 0.5) — the mean-field family contains it, so VI must
        land on it: mean within 0.02, variance within 0.05."""
        logp = lambda w: -0.5 * (w[0] - 1.0) ** 2 / 0.5
        grad = lambda w: np.array([-(w[0] - 1.0) / 0.5])
        state = vi_fit(logp, grad, np.zeros(1), iterations=2000,
                       learning_rate=0.05, rng=np.random.default_rng(42))
        assert abs(state.mean[0] - 1.0) < 0.02
        assert abs(state.std[0] ** 2 - 0.5) < 0.05

    def test_elbo_trace_rises_toward_the_analytic_optimum(self):
        """At the optimum the ELBO equals log of the normalizer of the target;
        for the unnormalized density -(w-1)^2/(2*0.5) that is log sqrt(2 pi 0.5)."""
        logp = lambda w: -0.5 * (w[0] - 1.0) ** 2 / 0.5
        grad = lambda w: np.array([-(w[0] - 1.0) / 0.5])
        state = vi_fit(logp, grad, np.zeros(1), iterations=2000,
                       learning_rate=0.05, rng=np.random.default_rng(0))
        assert len(state.elbo_trace) == 2000
        head = np.mean(state.elbo_trace[:20])
        tail = np.mean(state.elbo_trace[-200:])
        assert tail > head
        np.testing.assert_allclose(tail, math.log(math.sqrt(2 * math.pi * 0.5)), atol=0.05)

    def test_diagonal_gaussian_in_two_dimensions(self):
        target_mean = np.array([2.0, -1.0])
        target_var = np.array([0.3, 1.5])
        logp = lambda w: -0.5 * float(np.sum((w - target_mean) ** 2 / target_var))
        grad = lambda w: -(w - target_mean) / target_var
        state = vi_fit(logp, grad, np.zeros(2), iterations=5000, mc_samples=32,
                       learning_rate=0.02, rng=np.random.default_rng(1))
        np.testing.assert_allclose(state.mean, target_mean, atol=0.06)
        np.testing.assert_allclose(state.std**2, target_var, atol=0.12)

    def test_divergent_objective_raises(self):
        logp = lambda w: float("inf")
        grad = lambda w: np.zeros(1)
        with pytest.raises(RuntimeError, match="diverged"):
            vi_fit(logp, grad, np.zeros(1), iterations=10, rng=np.random.default_rng(0))

    def test_sampling_from_the_fitted_state(self):
        state = ViState(mean=np.array([1.0, 2.0]), log_std=np.log([0.5, 2.0]))
        draws = vi_sample(state, 40_000, np.random.default_rng(42))
        assert draws.provenance == "vi"
        np.testing.assert_allclose(draws.samples.mean(axis=0), [1.0, 2.0], atol=0.05)
        np.testing.assert_allclose(draws.samples.std(axis=0), [0.5, 2.0], atol=0.05)

    def test_state_validation(self):
        with pytest.raises(ValueError, match="same shape"):
            ViState(mean=np.zeros(2), log_std=np.zeros(3))
        bad = ViState(mean=np.array([np.nan]), log_std=np.zeros(1))
        with pytest.raises(ValueError, match="finite"):
            vi_sample(bad, 10, np.random.default_rng(0))
        with pytest.raises(ValueError, match="mc_samples"):
            vi_fit(lambda w: 0.0, lambda w: np.zeros(1), np.zeros(1), mc_samples=0)

    def test_deterministic_given_rng(self):
        logp = lambda w: -0.5 * float(w @ w)
        grad = lambda w: -w
        a = vi_fit(logp, grad, np.zeros(2), iterations=50, rng=np.random.default_rng(4))
        b = vi_fit(logp, grad, np.zeros(2), iterations=50, rng=np.random.default_rng(4))
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.log_std, b.log_std)
