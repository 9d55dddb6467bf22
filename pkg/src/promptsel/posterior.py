"""Draw parameter samples from p(W | S_t).

Three routes: exact draws for Gaussian (conjugate) posteriors, Hamiltonian
Monte Carlo with a leapfrog integrator and Metropolis correction, and
mean-field Gaussian variational inference trained by reparameterized
stochastic gradient ascent on the ELBO.

One deliberate deviation from the usual accept-only counting: on a rejected
proposal the chain advances by recording the current state (standard
Metropolis-Hastings), so the returned sample count is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .surrogate import GaussianPosterior

__all__ = [
    "PosteriorSampleSet",
    "HmcConfig",
    "HmcDiagnostics",
    "ViState",
    "exact_gaussian_sample",
    "leapfrog",
    "hmc_sample",
    "vi_fit",
    "vi_sample",
]


@dataclass
class PosteriorSampleSet:
    """K sampled parameter vectors, with their provenance."""

    samples: np.ndarray  # (K, P)
    provenance: str
    round: int = 0

    def __post_init__(self) -> None:
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[0] < 2:
            raise ValueError("a posterior sample set needs K >= 2")
        if self.provenance not in ("exact", "hmc", "vi"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def __len__(self) -> int:
        return self.samples.shape[0]


def exact_gaussian_sample(
    posterior: GaussianPosterior,
    k: int,
    rng: np.random.Generator,
    round: int = 0,
) -> PosteriorSampleSet:
    """K draws mean + chol(cov) @ xi, with jitter 1e-10 * trace/p on failure."""
    cov = posterior.covariance
    p = len(posterior.mean)
    if np.allclose(cov, 0.0):
        chol = np.zeros_like(cov)
    else:
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            jitter = 1e-10 * float(np.trace(cov)) / p
            try:
                chol = np.linalg.cholesky(cov + jitter * np.eye(p))
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    f"posterior covariance not factorizable after jitter: {exc}"
                ) from exc
    xi = rng.standard_normal((k, p))
    return PosteriorSampleSet(posterior.mean + xi @ chol.T, provenance="exact", round=round)


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo
# ---------------------------------------------------------------------------


@dataclass
class HmcConfig:
    step_size: float = 0.01
    leapfrog_steps: int = 20
    burn_in: int = 500
    mass: float | np.ndarray = 1.0  # diagonal of M
    adapt: bool = True  # dual-averaging step-size adaptation during burn-in
    target_accept: float = 0.75

    def __post_init__(self) -> None:
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.leapfrog_steps < 1:
            raise ValueError("leapfrog_steps must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")


@dataclass
class HmcDiagnostics:
    acceptance_rate: float
    post_burnin_acceptance: float
    final_step_size: float
    n_proposals: int


def leapfrog(
    grad_log_density: Callable[[np.ndarray], np.ndarray],
    q: np.ndarray,
    p: np.ndarray,
    step_size: float,
    n_steps: int,
    mass: float | np.ndarray = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Half/full/half leapfrog integration of Hamiltonian dynamics.

    grad_log_density is the gradient of log pi(q) (= -grad U).  Volume
    preserving and time reversible: negating the returned momentum and
    integrating again returns (q, -p) up to float roundoff.
    """
    q = np.asarray(q, dtype=float).copy()
    p = np.asarray(p, dtype=float).copy()
    inv_mass = 1.0 / np.asarray(mass, dtype=float)
    p = p + 0.5 * step_size * grad_log_density(q)
    for step in range(n_steps):
        q = q + step_size * inv_mass * p
        if step < n_steps - 1:
            p = p + step_size * grad_log_density(q)
    p = p + 0.5 * step_size * grad_log_density(q)
    return q, p


def _hamiltonian(log_density_value: float, p: np.ndarray, mass: float | np.ndarray) -> float:
    inv_mass = 1.0 / np.asarray(mass, dtype=float)
    return -log_density_value + 0.5 * float(np.sum(p * inv_mass * p))


def hmc_sample(
    log_density: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    init: np.ndarray,
    cfg: HmcConfig,
    k: int,
    rng: np.random.Generator,
    round: int = 0,
) -> tuple[PosteriorSampleSet, HmcDiagnostics]:
    """K post-burn-in HMC states with Metropolis acceptance statistics.

    During burn-in the step size is adapted by dual averaging toward
    cfg.target_accept when cfg.adapt is set; it is frozen afterwards.
    """
    q = np.asarray(init, dtype=float).copy()
    logp = float(log_density(q))
    if not math.isfinite(logp):
        raise RuntimeError(f"non-finite log density at the initial point: {logp}")
    mass_diag = np.asarray(cfg.mass, dtype=float)
    dim = len(q)

    # Dual averaging state (Hoffman & Gelman defaults).
    eps = cfg.step_size
    mu = math.log(10.0 * cfg.step_size)
    log_eps_bar = 0.0
    h_bar = 0.0
    gamma, t0, kappa = 0.05, 10.0, 0.75

    samples = np.empty((k, dim))
    accepts = 0
    accepts_post = 0
    total = cfg.burn_in + k
    for it in range(total):
        p0 = rng.standard_normal(dim) * np.sqrt(mass_diag)
        h_old = _hamiltonian(logp, p0, cfg.mass)
        q_new, p_new = leapfrog(gradient, q, p0, eps, cfg.leapfrog_steps, cfg.mass)
        logp_new = float(log_density(q_new))
        if not (np.all(np.isfinite(q_new)) and math.isfinite(logp_new)):
            raise RuntimeError(
                f"non-finite state at iteration {it}: logp={logp_new!r}; "
                f"step_size={eps:.3g}, leapfrog_steps={cfg.leapfrog_steps}"
            )
        h_new = _hamiltonian(logp_new, p_new, cfg.mass)
        alpha = min(1.0, math.exp(min(0.0, h_old - h_new)))
        if rng.uniform() < alpha:
            q, logp = q_new, logp_new
            accepts += 1
            if it >= cfg.burn_in:
                accepts_post += 1
        if cfg.adapt and it < cfg.burn_in:
            m = it + 1
            h_bar = (1.0 - 1.0 / (m + t0)) * h_bar + (cfg.target_accept - alpha) / (m + t0)
            log_eps = mu - math.sqrt(m) / gamma * h_bar
            eta = m ** (-kappa)
            log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar
            eps = math.exp(log_eps)
            if it == cfg.burn_in - 1:
                eps = math.exp(log_eps_bar)
        if it >= cfg.burn_in:
            samples[it - cfg.burn_in] = q

    diagnostics = HmcDiagnostics(
        acceptance_rate=accepts / total,
        post_burnin_acceptance=accepts_post / k if k else float("nan"),
        final_step_size=eps,
        n_proposals=total,
    )
    return PosteriorSampleSet(samples, provenance="hmc", round=round), diagnostics


# ---------------------------------------------------------------------------
# Mean-field Gaussian variational inference
# ---------------------------------------------------------------------------


@dataclass
class ViState:
    """Mean-field Gaussian variational parameters and the training trace."""

    mean: np.ndarray
    log_std: np.ndarray
    elbo_trace: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)
        if self.mean.shape != self.log_std.shape:
            raise ValueError("mean and log_std must have the same shape")

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


def vi_fit(
    log_joint: Callable[[np.ndarray], float],
    grad_log_joint: Callable[[np.ndarray], np.ndarray],
    init_mean: np.ndarray,
    iterations: int = 2000,
    learning_rate: float = 0.05,
    mc_samples: int = 8,
    rng: np.random.Generator | None = None,
    init_log_std: float = -1.0,
) -> ViState:
    """Maximize the ELBO over a mean-field Gaussian by reparameterized SGA.

    The gradient uses W = mean + std * xi with the analytic entropy term
    (d entropy / d log_std = 1), estimated from mc_samples draws per step;
    updates use Adam.  The per-iteration ELBO estimate is recorded in
    elbo_trace.  Divergence (non-finite ELBO or iterate) aborts with the
    trace attached.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    rng = rng or np.random.default_rng()
    mean = np.asarray(init_mean, dtype=float).copy()
    log_std = np.full_like(mean, float(init_log_std))
    dim = len(mean)
    entropy_const = 0.5 * dim * math.log(2.0 * math.pi * math.e)

    # Adam state over the concatenated (mean, log_std) vector.
    m_t = np.zeros(2 * dim)
    v_t = np.zeros(2 * dim)
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8

    trace: list[float] = []
    for it in range(1, iterations + 1):
        std = np.exp(log_std)
        xi = rng.standard_normal((mc_samples, dim))
        ws = mean + std * xi
        logps = np.array([log_joint(w) for w in ws])
        grads = np.stack([grad_log_joint(w) for w in ws])
        elbo = float(np.mean(logps) + np.sum(log_std) + entropy_const)
        trace.append(elbo)
        if not math.isfinite(elbo):
            raise RuntimeError(f"ELBO diverged at iteration {it}; trace: {trace[-5:]}")
        g_mean = grads.mean(axis=0)
        g_log_std = (grads * xi).mean(axis=0) * std + 1.0
        g = np.concatenate([g_mean, g_log_std])

        m_t = beta1 * m_t + (1.0 - beta1) * g
        v_t = beta2 * v_t + (1.0 - beta2) * g**2
        m_hat = m_t / (1.0 - beta1**it)
        v_hat = v_t / (1.0 - beta2**it)
        step = learning_rate * m_hat / (np.sqrt(v_hat) + eps_adam)
        mean = mean + step[:dim]
        log_std = log_std + step[dim:]
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
            raise RuntimeError(f"variational parameters diverged at iteration {it}")

    return ViState(mean=mean, log_std=log_std, elbo_trace=trace)


def vi_sample(
    state: ViState, k: int, rng: np.random.Generator, round: int = 0
) -> PosteriorSampleSet:
    """K mean-field Gaussian draws from the fitted variational distribution."""
    if not (np.all(np.isfinite(state.mean)) and np.all(np.isfinite(state.log_std))):
        raise ValueError("variational state is not finite")
    xi = rng.standard_normal((k, len(state.mean)))
    return PosteriorSampleSet(state.mean + state.std * xi, provenance="vi", round=round)
