"""Candidate scoring for the next evaluation.

M-UCB scores each candidate as

    alpha_t(z_n) = mu_t(z_n) + beta_t * (sigma_t(z_n) + gamma(r_n(t)))

from the posterior sample set of the round, and is maximized either
exhaustively (argmax_mucb) or through its probabilistic reparameterization:
a categorical distribution p(z_i; theta) = theta_i / sum_j theta_j over the
candidates, optimized in theta by projected stochastic gradient ascent with
REINFORCE gradient estimates.

Candidate indices returned by this module are 1-based (matching SoftPrompt
ids and the observation ledger); the alpha-sampler callables receive 0-based
positions into the candidate arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .posterior import PosteriorSampleSet
from .surrogate import SurrogateSpec, forward_batch

__all__ = [
    "default_beta",
    "default_gamma",
    "PrConfig",
    "AcquisitionConfig",
    "PrState",
    "candidate_stats",
    "candidate_stats_batch",
    "mucb",
    "mucb_values",
    "argmax_mucb",
    "pr_prob",
    "pr_gradient_estimate",
    "pr_sga_optimize",
    "pr_sample_candidate",
    "alpha_from_vector",
]


def default_beta(t: int) -> float:
    """beta_t = sqrt(2 log t); 0 for t <= 1."""
    return math.sqrt(2.0 * math.log(t)) if t > 1 else 0.0


def default_gamma(r: int) -> float:
    """gamma(r) = 2 / sqrt(r), with the r = 0 value pinned at 4 (= 2 gamma(1)).

    The 1/sqrt(r) decay is undefined at r = 0; 4 keeps never-evaluated
    candidates strongly favored without producing infinities.
    """
    if r < 0:
        raise ValueError("evaluation count must be >= 0")
    return 4.0 if r == 0 else 2.0 / math.sqrt(r)


def default_pr_learning_rate(t: int) -> float:
    return 0.5 / math.sqrt(t)


@dataclass
class PrConfig:
    """Projected-SGA settings for the probabilistic reparameterization."""

    n_starts: int = 8
    n_iterations: int = 300
    learning_rate: Callable[[int], float] = default_pr_learning_rate
    n_samples: int = 64  # REINFORCE draws per gradient estimate
    theta_floor: float = 1e-6

    def __post_init__(self) -> None:
        if self.n_starts < 1 or self.n_iterations < 1 or self.n_samples < 1:
            raise ValueError("n_starts, n_iterations and n_samples must be >= 1")
        if not 0.0 < self.theta_floor < 1.0:
            raise ValueError("theta_floor must be in (0, 1)")


@dataclass
class AcquisitionConfig:
    beta_schedule: Callable[[int], float] = default_beta
    gamma: Callable[[int], float] = default_gamma
    n_posterior_samples: int = 100
    pr: PrConfig = field(default_factory=PrConfig)


@dataclass
class PrState:
    """The categorical parameter theta, kept inside [floor, 1] coordinate-wise."""

    theta: np.ndarray
    floor: float = 1e-6

    def __post_init__(self) -> None:
        self.theta = np.clip(np.asarray(self.theta, dtype=float), self.floor, 1.0)


# ---------------------------------------------------------------------------
# Posterior-sample statistics and M-UCB
# ---------------------------------------------------------------------------


def candidate_stats(
    samples: PosteriorSampleSet, spec: SurrogateSpec, z: np.ndarray
) -> tuple[float, float]:
    """Sample mean and (K-1)-denominator std of {f(z; W_k)} over the sample set."""
    mus, sigmas = candidate_stats_batch(samples, spec, np.atleast_2d(z))
    return float(mus[0]), float(sigmas[0])


def candidate_stats_batch(
    samples: PosteriorSampleSet, spec: SurrogateSpec, zs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    values = forward_batch(spec, samples.samples, zs)  # (K, N)
    return values.mean(axis=0), values.std(axis=0, ddof=1)


def mucb(
    mu: float | np.ndarray,
    sigma: float | np.ndarray,
    beta: float,
    gamma_value: float | np.ndarray,
) -> float | np.ndarray:
    """alpha = mu + beta * (sigma + gamma)."""
    return mu + beta * (sigma + gamma_value)


def mucb_values(
    mus: np.ndarray,
    sigmas: np.ndarray,
    counts: np.ndarray,
    cfg: AcquisitionConfig,
    t: int,
) -> np.ndarray:
    """The M-UCB score of every candidate at round t."""
    beta = cfg.beta_schedule(t)
    gammas = np.array([cfg.gamma(int(r)) for r in counts])
    return np.asarray(mucb(np.asarray(mus), np.asarray(sigmas), beta, gammas))


def argmax_mucb(
    mus: np.ndarray,
    sigmas: np.ndarray,
    counts: np.ndarray,
    cfg: AcquisitionConfig,
    t: int,
) -> int:
    """Lowest-index maximizer of the M-UCB scores, as a 1-based candidate id."""
    return int(np.argmax(mucb_values(mus, sigmas, counts, cfg, t))) + 1


# ---------------------------------------------------------------------------
# Probabilistic reparameterization
# ---------------------------------------------------------------------------

AlphaSampler = Callable[[np.ndarray], np.ndarray]
"""Maps an array of 0-based candidate positions to their alpha values."""


def alpha_from_vector(alpha: np.ndarray) -> AlphaSampler:
    """Wrap a fixed per-candidate alpha vector as an AlphaSampler."""
    alpha = np.asarray(alpha, dtype=float)
    return lambda idx: alpha[idx]


def pr_prob(state: PrState) -> np.ndarray:
    """p(z_i; theta) = theta_i / sum_j theta_j."""
    total = state.theta.sum()
    if total <= 0:
        raise ValueError("theta must have positive sum")
    return state.theta / total


def pr_gradient_estimate(
    state: PrState,
    alpha_sampler: AlphaSampler,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """REINFORCE estimate (1/I) sum_i alpha(z_i) grad_theta log p(z_i; theta).

    grad_theta log p(z_i; theta) has entry 1/theta_i at the sampled coordinate
    and -1/sum(theta) everywhere.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    n = len(state.theta)
    probs = pr_prob(state)
    idx = rng.choice(n, size=n_samples, p=probs)
    alpha = np.asarray(alpha_sampler(idx), dtype=float)
    grad = np.bincount(idx, weights=alpha / state.theta[idx], minlength=n) / n_samples
    grad -= alpha.mean() / state.theta.sum()
    return grad


def pr_sga_optimize(
    alpha_sampler: AlphaSampler,
    n_candidates: int,
    cfg: PrConfig,
    rng: np.random.Generator,
) -> PrState:
    """Multi-start projected SGA over theta in [floor, 1]^N.

    Each start runs n_iterations REINFORCE steps with the decaying learning
    rate, clipping every iterate back into the box.  The winning start is the
    one whose final theta yields the highest average sampled alpha (ties ->
    lowest start index).
    """
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    best_theta: np.ndarray | None = None
    best_value = -math.inf
    for _ in range(cfg.n_starts):
        theta = rng.uniform(cfg.theta_floor, 1.0, size=n_candidates)
        state = PrState(theta, floor=cfg.theta_floor)
        for it in range(1, cfg.n_iterations + 1):
            grad = pr_gradient_estimate(state, alpha_sampler, cfg.n_samples, rng)
            state.theta = np.clip(
                state.theta + cfg.learning_rate(it) * grad, cfg.theta_floor, 1.0
            )
        final_idx = rng.choice(n_candidates, size=cfg.n_samples, p=pr_prob(state))
        value = float(np.mean(alpha_sampler(final_idx)))
        if value > best_value:
            best_value = value
            best_theta = state.theta.copy()
    assert best_theta is not None
    return PrState(best_theta, floor=cfg.theta_floor)


def pr_sample_candidate(state: PrState, rng: np.random.Generator) -> int:
    """One categorical draw from p(z; theta), as a 1-based candidate id."""
    return int(rng.choice(len(state.theta), p=pr_prob(state))) + 1
