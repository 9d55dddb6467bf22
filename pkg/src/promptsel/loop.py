"""Stage 2 orchestration.

Warm-up evaluations and the fitted observation-variance model, the sequential
M-UCB loop, its probabilistic-reparameterization variant, and the
synthetic-observation hyperparameter tuner (a stochastic-kriging model fitted
on warm-up data replays the sequential step for each candidate (beta, gamma)
pair without spending real oracle budget).

Oracles are callables ``oracle(prompt: SoftPrompt, rng) -> float``.  Failed
calls are retried with exponential backoff and do not consume budget.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .acquisition import (
    AcquisitionConfig,
    alpha_from_vector,
    argmax_mucb,
    candidate_stats_batch,
    mucb_values,
    pr_sample_candidate,
    pr_sga_optimize,
)
from .core import CandidateSet, ObservationLog, SoftPrompt
from .posterior import (
    HmcConfig,
    PosteriorSampleSet,
    exact_gaussian_sample,
    hmc_sample,
    vi_fit,
    vi_sample,
)
from .surrogate import (
    SurrogateSpec,
    blr_exact_posterior,
    grad_log_posterior,
    log_posterior_density,
    median_heuristic,
)

__all__ = [
    "VARIANCE_FLOOR",
    "WarmupReport",
    "TraceRow",
    "RunResult",
    "SamplerChoice",
    "OracleError",
    "evaluate_with_retry",
    "choose_warmup_set",
    "run_warmup",
    "fit_variance_model",
    "VarianceModel",
    "draw_posterior_samples",
    "run_mucb_loop",
    "run_prmucb_loop",
    "SkModel",
    "fit_sk_model",
    "sk_synthetic_draw",
    "HyperPair",
    "tune_hyperparameters",
]

VARIANCE_FLOOR = 1e-8

Oracle = Callable[[SoftPrompt, np.random.Generator], float]


class OracleError(RuntimeError):
    """Oracle call failed after exhausting retries."""


def evaluate_with_retry(
    fn: Callable[[], float],
    retries: int = 3,
    backoff: float = 0.05,
) -> float:
    """Call fn, retrying up to ``retries`` times with exponential backoff."""
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            return float(fn())
        except Exception as exc:  # transport, parse, user oracle errors
            last = exc
            if attempt < retries:
                time.sleep(backoff * (2**attempt))
    raise OracleError(f"oracle failed after {retries} retries: {last}") from last


# ---------------------------------------------------------------------------
# Warm-up
# ---------------------------------------------------------------------------


class VarianceModel:
    """Interpolating kriging on log variances, exponentiated at prediction.

    Guarantees positivity; far from the data the prediction reverts to the
    geometric mean of the training variances.  Degenerate inputs (all z equal)
    collapse to a constant predictor at the arithmetic mean variance.
    """

    def __init__(self, z_train: np.ndarray, variances: np.ndarray) -> None:
        z_train = np.atleast_2d(np.asarray(z_train, dtype=float))
        variances = np.asarray(variances, dtype=float)
        if len(z_train) != len(variances):
            raise ValueError("one variance per training input required")
        if len(z_train) < 2:
            raise ValueError("need at least 2 (z, variance) pairs")
        if np.any(variances < 0):
            raise ValueError("variances must be >= 0")
        self._constant: float | None = None
        if np.allclose(z_train, z_train[0]):
            self._constant = float(np.mean(variances))
            return
        self.z_train = z_train
        y = np.log(variances + VARIANCE_FLOOR)
        self._y_mean = float(np.mean(y))
        self._lengthscale = median_heuristic(z_train)
        k = self._kernel(z_train, z_train)
        k[np.diag_indices_from(k)] += 1e-10
        c, low = cho_factor(k)
        self._alpha = cho_solve((c, low), y - self._y_mean)

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d2 = (
            np.sum(a**2, axis=1)[:, None]
            + np.sum(b**2, axis=1)[None, :]
            - 2.0 * a @ b.T
        )
        return np.exp(-np.maximum(d2, 0.0) / (2.0 * self._lengthscale**2))

    def batch(self, zs: np.ndarray) -> np.ndarray:
        zs = np.atleast_2d(np.asarray(zs, dtype=float))
        if self._constant is not None:
            return np.full(len(zs), max(self._constant, VARIANCE_FLOOR))
        kstar = self._kernel(self.z_train, zs)
        pred = np.exp(self._y_mean + kstar.T @ self._alpha)
        return np.maximum(pred, VARIANCE_FLOOR)

    def __call__(self, z: np.ndarray) -> float:
        return float(self.batch(np.atleast_2d(z))[0])


def fit_variance_model(
    pairs: Sequence[tuple[np.ndarray, float]] | tuple[np.ndarray, np.ndarray],
) -> VarianceModel:
    """Fit the positive variance predictor g* from (z, sample variance) pairs."""
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        z_train, variances = pairs
    else:
        z_train = np.stack([np.asarray(z, dtype=float) for z, _ in pairs])
        variances = np.array([v for _, v in pairs], dtype=float)
    return VarianceModel(z_train, variances)


@dataclass
class WarmupReport:
    """What the warm-up stage produced: variances, the fitted g*, and T_W."""

    warmup_set: tuple[int, ...]
    sample_variances: dict[int, float]
    variance_model: VarianceModel
    t_w: int
    replications: int


def choose_warmup_set(
    candidates: CandidateSet, rng: np.random.Generator | None = None
) -> list[int]:
    """Initial-example-derived candidates when marked; else ceil(0.05 N), min 2."""
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    if candidates.initial_indices:
        return sorted(candidates.initial_indices)
    if rng is None:
        raise ValueError("rng required when no initial-candidate provenance exists")
    size = max(2, math.ceil(0.05 * len(candidates)))
    size = min(size, len(candidates))
    picks = rng.choice(len(candidates), size=size, replace=False)
    return sorted(int(i) + 1 for i in picks)


def run_warmup(
    candidates: CandidateSet,
    indices: Sequence[int],
    replications: int,
    oracle: Oracle,
    log: ObservationLog,
    rng: np.random.Generator,
    retries: int = 3,
    backoff: float = 0.05,
    trace: list["TraceRow"] | None = None,
) -> WarmupReport:
    """Evaluate each warm-up candidate R times and fit the variance model g*.

    Also populates candidates.noise_variance with g* at every candidate.
    """
    if replications < 2:
        raise ValueError("warm-up needs R >= 2 for sample variances")
    for n in indices:
        prompt = candidates.prompt(n)
        for _ in range(replications):
            score = evaluate_with_retry(
                lambda: oracle(prompt, rng), retries=retries, backoff=backoff
            )
            log.record_observation(n, score)
            if trace is not None:
                trace.append(TraceRow(log.round, n, score, "warmup"))
    variances = {
        n: max(log.sample_variance(n), VARIANCE_FLOOR) for n in indices
    }
    zmat = candidates.z_matrix
    model = fit_variance_model(
        (np.stack([zmat[n - 1] for n in indices]), np.array([variances[n] for n in indices]))
    )
    candidates.noise_variance = model.batch(zmat)
    return WarmupReport(
        warmup_set=tuple(indices),
        sample_variances=variances,
        variance_model=model,
        t_w=len(indices) * replications,
        replications=replications,
    )


# ---------------------------------------------------------------------------
# Sequential loops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceRow:
    round: int
    candidate: int
    score: float
    phase: str


@dataclass
class RunResult:
    selected: int | None
    log: ObservationLog
    trace: list[TraceRow]
    timings: dict[str, float]
    warmup: WarmupReport | None = None
    error: str | None = None


@dataclass
class SamplerChoice:
    """Which posterior sampler the sequential loop refreshes each round."""

    method: str = "exact"  # exact | hmc | vi
    refresh_every: int = 1
    hmc: HmcConfig = field(default_factory=HmcConfig)
    vi_iterations: int = 800
    vi_learning_rate: float = 0.05
    vi_mc_samples: int = 8

    def __post_init__(self) -> None:
        if self.method not in ("exact", "hmc", "vi"):
            raise ValueError(f"unknown sampler method {self.method!r}")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be >= 1")


def draw_posterior_samples(
    spec: SurrogateSpec,
    log: ObservationLog,
    candidates: CandidateSet,
    noise_variances: np.ndarray,
    choice: SamplerChoice,
    k: int,
    rng: np.random.Generator,
    t: int,
) -> PosteriorSampleSet:
    if choice.method == "exact":
        post = blr_exact_posterior(spec, log, candidates, noise_variances)
        return exact_gaussian_sample(post, k, rng, round=t)
    logp = lambda w: log_posterior_density(spec, w, log, candidates, noise_variances)
    grad = lambda w: grad_log_posterior(spec, w, log, candidates, noise_variances)
    init = 0.1 * rng.standard_normal(spec.n_params)
    if choice.method == "hmc":
        samples, _ = hmc_sample(logp, grad, init, choice.hmc, k, rng, round=t)
        return samples
    state = vi_fit(
        logp,
        grad,
        init,
        iterations=choice.vi_iterations,
        learning_rate=choice.vi_learning_rate,
        mc_samples=choice.vi_mc_samples,
        rng=rng,
    )
    return vi_sample(state, k, rng, round=t)


def _sequential_rounds(
    candidates: CandidateSet,
    spec: SurrogateSpec,
    sampler: SamplerChoice,
    acq: AcquisitionConfig,
    total_budget: int,
    oracle: Oracle,
    rng: np.random.Generator,
    log: ObservationLog,
    trace: list[TraceRow],
    timings: dict[str, float],
    optimizer: str,
    retries: int,
    backoff: float,
) -> str | None:
    """Run M-UCB / PR-M-UCB rounds until the ledger holds total_budget scores.

    Returns an error string when the oracle gave out (partial result), else None.
    """
    assert candidates.noise_variance is not None, "warm-up must populate noise variances"
    noise = candidates.noise_variance
    zmat = candidates.z_matrix
    n = len(candidates)
    samples: PosteriorSampleSet | None = None
    last_refresh = -1
    while log.round < total_budget:
        t = log.round
        started = time.perf_counter()
        if samples is None or (t - last_refresh) >= sampler.refresh_every:
            samples = draw_posterior_samples(
                spec, log, candidates, noise, sampler, acq.n_posterior_samples, rng, t
            )
            last_refresh = t
        timings["posterior"] = timings.get("posterior", 0.0) + time.perf_counter() - started

        started = time.perf_counter()
        mus, sigmas = candidate_stats_batch(samples, spec, zmat)
        counts = log.counts(n)
        if optimizer == "mucb":
            chosen = argmax_mucb(mus, sigmas, counts, acq, t)
        else:
            alpha = mucb_values(mus, sigmas, counts, acq, t)
            state = pr_sga_optimize(alpha_from_vector(alpha), n, acq.pr, rng)
            chosen = pr_sample_candidate(state, rng)
        timings["acquisition"] = timings.get("acquisition", 0.0) + time.perf_counter() - started

        started = time.perf_counter()
        prompt = candidates.prompt(chosen)
        try:
            score = evaluate_with_retry(
                lambda: oracle(prompt, rng), retries=retries, backoff=backoff
            )
        except OracleError as exc:
            timings["oracle"] = timings.get("oracle", 0.0) + time.perf_counter() - started
            return str(exc)
        timings["oracle"] = timings.get("oracle", 0.0) + time.perf_counter() - started
        log.record_observation(chosen, score)
        trace.append(TraceRow(log.round, chosen, score, optimizer))
    return None


def _run_loop(
    candidates: CandidateSet,
    spec: SurrogateSpec,
    sampler: SamplerChoice,
    acq: AcquisitionConfig,
    total_budget: int,
    oracle: Oracle,
    rng: np.random.Generator,
    optimizer: str,
    warmup_replications: int,
    retries: int,
    backoff: float,
) -> RunResult:
    log = ObservationLog(n_candidates=len(candidates))
    trace: list[TraceRow] = []
    timings: dict[str, float] = {}

    warmup_indices = choose_warmup_set(candidates, rng)
    t_w = len(warmup_indices) * warmup_replications
    if total_budget <= t_w:
        raise ValueError(f"budget T={total_budget} must exceed warm-up size {t_w}")

    started = time.perf_counter()
    try:
        report = run_warmup(
            candidates,
            warmup_indices,
            warmup_replications,
            oracle,
            log,
            rng,
            retries=retries,
            backoff=backoff,
            trace=trace,
        )
    except OracleError as exc:
        timings["warmup"] = time.perf_counter() - started
        selected = log.final_selection() if log.round else None
        return RunResult(selected, log, trace, timings, warmup=None, error=str(exc))
    timings["warmup"] = time.perf_counter() - started

    error = _sequential_rounds(
        candidates,
        spec,
        sampler,
        acq,
        total_budget,
        oracle,
        rng,
        log,
        trace,
        timings,
        optimizer,
        retries,
        backoff,
    )
    selected = log.final_selection() if log.round else None
    return RunResult(selected, log, trace, timings, warmup=report, error=error)


def run_mucb_loop(
    candidates: CandidateSet,
    spec: SurrogateSpec,
    sampler: SamplerChoice,
    acq: AcquisitionConfig,
    total_budget: int,
    oracle: Oracle,
    rng: np.random.Generator,
    warmup_replications: int = 5,
    retries: int = 3,
    backoff: float = 0.05,
) -> RunResult:
    """Warm-up, then one-evaluation-per-round M-UCB until the budget is spent."""
    return _run_loop(
        candidates, spec, sampler, acq, total_budget, oracle, rng,
        "mucb", warmup_replications, retries, backoff,
    )


def run_prmucb_loop(
    candidates: CandidateSet,
    spec: SurrogateSpec,
    sampler: SamplerChoice,
    acq: AcquisitionConfig,
    total_budget: int,
    oracle: Oracle,
    rng: np.random.Generator,
    warmup_replications: int = 5,
    retries: int = 3,
    backoff: float = 0.05,
) -> RunResult:
    """As run_mucb_loop, selecting candidates via the reparameterized SGA."""
    return _run_loop(
        candidates, spec, sampler, acq, total_budget, oracle, rng,
        "prmucb", warmup_replications, retries, backoff,
    )


# ---------------------------------------------------------------------------
# Stochastic-kriging synthetic-observation tuner
# ---------------------------------------------------------------------------


class SkModel:
    """Stochastic kriging over warm-up sample means, the tuner's generative model."""

    def __init__(
        self,
        z_train: np.ndarray,
        means: np.ndarray,
        mean_noise: np.ndarray,
        gstar: VarianceModel,
    ) -> None:
        self.z_train = np.atleast_2d(np.asarray(z_train, dtype=float))
        self.means = np.asarray(means, dtype=float)
        self.gstar = gstar
        self._prior_mean = float(np.mean(means))
        self._lengthscale = median_heuristic(self.z_train)
        k = self._kernel(self.z_train, self.z_train)
        sys = k + np.diag(np.asarray(mean_noise, dtype=float))
        sys[np.diag_indices_from(sys)] += 1e-10
        self._factor = cho_factor(sys)
        self._alpha = cho_solve(self._factor, self.means - self._prior_mean)

    def _kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d2 = (
            np.sum(a**2, axis=1)[:, None]
            + np.sum(b**2, axis=1)[None, :]
            - 2.0 * a @ b.T
        )
        return np.exp(-np.maximum(d2, 0.0) / (2.0 * self._lengthscale**2))

    def predict(self, z: np.ndarray) -> tuple[float, float]:
        """Predicted mean score and its squared prediction error at z."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        kstar = self._kernel(self.z_train, z)
        mu = self._prior_mean + float((kstar.T @ self._alpha)[0])
        var = 1.0 - float(np.einsum("ij,ij->j", kstar, cho_solve(self._factor, kstar))[0])
        return mu, max(var, 0.0)


def fit_sk_model(
    report: WarmupReport, log: ObservationLog, candidates: CandidateSet
) -> SkModel:
    """SK model on the warm-up candidates' sample means."""
    zmat = candidates.z_matrix
    idx = list(report.warmup_set)
    z_train = np.stack([zmat[n - 1] for n in idx])
    means = np.array([log.sample_mean(n) for n in idx])
    mean_noise = np.array(
        [report.sample_variances[n] / log.count(n) for n in idx]
    )
    return SkModel(z_train, means, mean_noise, report.variance_model)


def sk_synthetic_draw(sk: SkModel, z: np.ndarray, rng: np.random.Generator) -> float:
    """One draw from N(mu_SK(z), var_SK(z) + g*(z))."""
    mu, var = sk.predict(z)
    total = var + sk.gstar(z)
    return float(mu) if total <= 0 else float(rng.normal(mu, math.sqrt(total)))


@dataclass(frozen=True)
class HyperPair:
    """One (beta schedule, gamma function) candidate for the acquisition."""

    beta: Callable[[int], float]
    gamma: Callable[[int], float]
    label: str = ""


def tune_hyperparameters(
    candidates: CandidateSet,
    spec: SurrogateSpec,
    sampler: SamplerChoice,
    report: WarmupReport,
    log: ObservationLog,
    pairs: Sequence[HyperPair],
    inner_budget: int = 200,
    rng: np.random.Generator | None = None,
    acq_template: AcquisitionConfig | None = None,
) -> HyperPair:
    """Pick the (beta, gamma) pair whose simulated run ends at the best SK mean.

    Every pair replays the sequential step against synthetic SK observations
    from the same warm-up state and a common random seed; no real oracle
    budget is spent.  Ties break toward the lowest pair index.
    """
    if len(pairs) < 1:
        raise ValueError("need at least one hyperparameter pair")
    if len(pairs) == 1:
        return pairs[0]
    rng = rng or np.random.default_rng()
    try:
        sk = fit_sk_model(report, log, candidates)
    except Exception as exc:
        warnings.warn(f"SK fit failed ({exc}); keeping the first pair", stacklevel=2)
        return pairs[0]
    if inner_budget <= log.round:
        raise ValueError("inner_budget must exceed the warm-up observation count")

    def synthetic_oracle(prompt: SoftPrompt, inner_rng: np.random.Generator) -> float:
        return sk_synthetic_draw(sk, prompt.z, inner_rng)

    common_seed = int(rng.integers(2**63))
    template = acq_template or AcquisitionConfig()
    best_pair = pairs[0]
    best_value = -math.inf
    for pair in pairs:
        inner_rng = np.random.default_rng(common_seed)
        inner_log = log.copy()
        acq = AcquisitionConfig(
            beta_schedule=pair.beta,
            gamma=pair.gamma,
            n_posterior_samples=template.n_posterior_samples,
            pr=template.pr,
        )
        trace: list[TraceRow] = []
        timings: dict[str, float] = {}
        error = _sequential_rounds(
            candidates, spec, sampler, acq, inner_budget, synthetic_oracle,
            inner_rng, inner_log, trace, timings, "mucb", retries=0, backoff=0.0,
        )
        if error is not None:
            continue
        selected = inner_log.final_selection()
        value, _ = sk.predict(candidates.prompt(selected).z)
        if value > best_value:
            best_value = value
            best_pair = pair
    return best_pair
