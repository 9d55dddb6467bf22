"""Kriging with a learned low-rank projection kernel, plus EI refinement.

The kernel is K(X, X') = A(X)^T A(X') where A is a small MLP mapping the
high-dimensional latent point to D* learned coordinates.  The projection is
fitted by maximizing the marginal likelihood of the observed sample means
under heteroscedastic noise; refinement then proposes new latent points by
expected improvement over the box, evaluating the oracle once per step.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm

from .loop import evaluate_with_retry
from .search import perturbation_covariance

__all__ = [
    "ProjectionMap",
    "psk_log_likelihood",
    "psk_likelihood_grad",
    "psk_fit",
    "PskModel",
    "psk_predict",
    "psk_select_dimension",
    "expected_improvement",
    "RefineRow",
    "RefineResult",
    "refine_search",
]

_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "relu": (lambda a: np.maximum(a, 0.0), lambda a: (a > 0).astype(float)),
}


@dataclass
class ProjectionMap:
    """Feed-forward map from the latent box to D* kernel coordinates."""

    widths: tuple[int, ...]  # (input dim, hidden..., D*)
    weights: np.ndarray  # flat parameter vector
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.n_params,):
            raise ValueError(
                f"expected {self.n_params} parameters, got {self.weights.shape}"
            )

    @property
    def n_params(self) -> int:
        return sum(
            self.widths[i] * self.widths[i + 1] + self.widths[i + 1]
            for i in range(len(self.widths) - 1)
        )

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @classmethod
    def init_random(
        cls,
        input_dim: int,
        output_dim: int,
        rng: np.random.Generator,
        hidden: int = 128,
        activation: str = "tanh",
    ) -> "ProjectionMap":
        widths = (input_dim, hidden, output_dim)
        chunks = []
        for m_in, m_out in zip(widths[:-1], widths[1:]):
            scale = math.sqrt(2.0 / (m_in + m_out))
            chunks.append(scale * rng.standard_normal(m_in * m_out))
            chunks.append(np.zeros(m_out))
        return cls(widths, np.concatenate(chunks), activation)

    def _unpack(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        offset = 0
        for m_in, m_out in zip(self.widths[:-1], self.widths[1:]):
            mat = w[offset : offset + m_in * m_out].reshape(m_out, m_in)
            offset += m_in * m_out
            bias = w[offset : offset + m_out]
            offset += m_out
            layers.append((mat, bias))
        return layers

    def forward(self, x: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
        """(n, input_dim) -> (n, D*); the last layer is linear."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        act, _ = _ACTIVATIONS[self.activation]
        layers = self._unpack(self.weights if w is None else np.asarray(w, dtype=float))
        h = x
        for i, (mat, bias) in enumerate(layers):
            pre = h @ mat.T + bias
            h = act(pre) if i < len(layers) - 1 else pre
        return h

    def _forward_cache(
        self, x: np.ndarray, w: np.ndarray
    ) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
        act, _ = _ACTIVATIONS[self.activation]
        layers = self._unpack(w)
        h = np.atleast_2d(x)
        hs, pres = [h], []
        for i, (mat, bias) in enumerate(layers):
            pre = h @ mat.T + bias
            pres.append(pre)
            h = act(pre) if i < len(layers) - 1 else pre
            hs.append(h)
        return h, hs, pres

    def backward(self, x: np.ndarray, upstream: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Gradient of sum(upstream * forward(x; w)) with respect to w, flat."""
        _, deriv = _ACTIVATIONS[self.activation]
        layers = self._unpack(w)
        _, hs, pres = self._forward_cache(x, w)
        grads: list[np.ndarray] = [np.empty(0)] * (2 * len(layers))
        delta = np.atleast_2d(upstream)
        for i in reversed(range(len(layers))):
            mat, _ = layers[i]
            if i < len(layers) - 1:
                delta = delta * deriv(pres[i])
            grads[2 * i] = (delta.T @ hs[i]).ravel()
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ mat
        return np.concatenate(grads)


def _system_matrix(
    projection: ProjectionMap,
    x: np.ndarray,
    noise_diag: np.ndarray,
    w: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(features A, S = A A^T + diag(noise) + jitter)."""
    a = projection.forward(x, w)
    s = a @ a.T + np.diag(noise_diag)
    jitter = 1e-8 * float(np.mean(np.diag(s)))
    s[np.diag_indices_from(s)] += jitter
    return a, s


def psk_log_likelihood(
    projection: ProjectionMap,
    x: np.ndarray,
    vbar: np.ndarray,
    noise_diag: np.ndarray,
    w: np.ndarray | None = None,
) -> float:
    """Marginal log likelihood -1/2 log|S| - 1/2 vbar^T S^{-1} vbar (no constant)."""
    vbar = np.asarray(vbar, dtype=float)
    _, s = _system_matrix(projection, x, np.asarray(noise_diag, dtype=float), w)
    factor = cho_factor(s)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    alpha = cho_solve(factor, vbar)
    return -0.5 * logdet - 0.5 * float(vbar @ alpha)


def psk_likelihood_grad(
    projection: ProjectionMap,
    x: np.ndarray,
    vbar: np.ndarray,
    noise_diag: np.ndarray,
    w: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the marginal log likelihood with respect to the flat weights.

    With G = (alpha alpha^T - S^{-1})/2 the kernel-space gradient is
    dl/dA = 2 G A, then the chain rule runs back through the projection.
    """
    weights = projection.weights if w is None else np.asarray(w, dtype=float)
    vbar = np.asarray(vbar, dtype=float)
    a, s = _system_matrix(projection, x, np.asarray(noise_diag, dtype=float), weights)
    factor = cho_factor(s)
    alpha = cho_solve(factor, vbar)
    s_inv = cho_solve(factor, np.eye(len(s)))
    g = 0.5 * (np.outer(alpha, alpha) - s_inv)
    upstream = 2.0 * g @ a
    return projection.backward(np.atleast_2d(x), upstream, weights)


def psk_fit(
    x: np.ndarray,
    vbar: np.ndarray,
    noise_diag: np.ndarray,
    d_star: int,
    hidden: int = 128,
    activation: str = "tanh",
    n_starts: int = 4,
    max_iter: int = 150,
    rng: np.random.Generator | None = None,
) -> ProjectionMap:
    """Maximize the marginal likelihood over projection weights, multi-start.

    The returned map carries a ``fit_trace`` attribute: one list of objective
    values per start.  All starts failing to produce a finite objective is an
    error (traces attached for post-mortems).
    """
    rng = rng or np.random.default_rng()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    vbar = np.asarray(vbar, dtype=float)
    noise_diag = np.asarray(noise_diag, dtype=float)
    if not (len(x) == len(vbar) == len(noise_diag)):
        raise ValueError("x, vbar, noise_diag must agree in length")
    if d_star < 1:
        raise ValueError("d_star must be >= 1")

    template = ProjectionMap.init_random(x.shape[1], d_star, rng, hidden, activation)
    traces: list[list[float]] = []
    best_w: np.ndarray | None = None
    best_val = math.inf

    def objective(w: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            val = -psk_log_likelihood(template, x, vbar, noise_diag, w)
            grad = -psk_likelihood_grad(template, x, vbar, noise_diag, w)
        except np.linalg.LinAlgError:
            return math.inf, np.zeros_like(w)
        if not np.isfinite(val):
            return math.inf, np.zeros_like(grad)
        return val, grad

    for _ in range(n_starts):
        w0 = ProjectionMap.init_random(x.shape[1], d_star, rng, hidden, activation).weights
        trace: list[float] = []
        result = minimize(
            objective,
            w0,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": max_iter},
            callback=lambda wk: trace.append(-objective(wk)[0]),
        )
        traces.append(trace)
        if np.isfinite(result.fun) and result.fun < best_val:
            best_val = float(result.fun)
            best_w = np.asarray(result.x, dtype=float)
    if best_w is None:
        raise RuntimeError(f"all {n_starts} projection fits diverged; traces: {traces}")
    fitted = ProjectionMap(template.widths, best_w, activation)
    fitted.fit_trace = traces  # type: ignore[attr-defined]
    return fitted


@dataclass
class PskModel:
    """Fitted projection kernel plus training data and any refinement points.

    Training points carry sample means over ``reps`` replications with
    per-point observation variance ``noise_train``; refinement additions are
    single evaluations with noise from ``noise_fn``.
    """

    projection: ProjectionMap
    x_train: np.ndarray
    vbar: np.ndarray
    reps: np.ndarray
    noise_train: np.ndarray
    noise_fn: Callable[[np.ndarray], float]
    extra_x: list[np.ndarray] = field(default_factory=list)
    extra_v: list[float] = field(default_factory=list)
    extra_noise: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.x_train = np.atleast_2d(np.asarray(self.x_train, dtype=float))
        self.vbar = np.asarray(self.vbar, dtype=float)
        self.reps = np.asarray(self.reps, dtype=float)
        self.noise_train = np.asarray(self.noise_train, dtype=float)
        if not (len(self.x_train) == len(self.vbar) == len(self.reps) == len(self.noise_train)):
            raise ValueError("training arrays must agree in length")
        self._cache: tuple | None = None

    def _all_points(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xs = self.x_train
        vs = self.vbar
        noise = self.noise_train / self.reps
        if self.extra_x:
            xs = np.vstack([xs, np.stack(self.extra_x)])
            vs = np.concatenate([vs, np.array(self.extra_v)])
            noise = np.concatenate([noise, np.array(self.extra_noise)])
        return xs, vs, noise

    def _factorize(self) -> tuple:
        if self._cache is None:
            xs, vs, noise = self._all_points()
            feats = self.projection.forward(xs)
            s = feats @ feats.T + np.diag(noise)
            jitter = 1e-8 * float(np.mean(np.diag(s)))
            s[np.diag_indices_from(s)] += jitter
            factor = cho_factor(s)
            alpha = cho_solve(factor, vs)
            self._cache = (feats, factor, alpha)
        return self._cache

    def append(self, x: np.ndarray, score: float, noise: float | None = None) -> None:
        """Add one refinement evaluation; invalidates the factorization."""
        x = np.asarray(x, dtype=float).ravel()
        self.extra_x.append(x)
        self.extra_v.append(float(score))
        self.extra_noise.append(
            float(self.noise_fn(x)) if noise is None else float(noise)
        )
        self._cache = None

    @property
    def incumbent(self) -> float:
        """Best observed value over training means and refinement scores."""
        best = float(np.max(self.vbar))
        if self.extra_v:
            best = max(best, max(self.extra_v))
        return best

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return psk_predict(self, x)


def psk_predict(model: PskModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of the latent score surface at query rows x.

    Tiny negative variances (> -1e-8) clamp to zero; anything more negative
    signals a broken factorization and raises.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    feats, factor, alpha = model._factorize()
    a_q = model.projection.forward(x)
    kstar = feats @ a_q.T  # (n_train, n_query)
    mean = kstar.T @ alpha
    solved = cho_solve(factor, kstar)
    var = np.einsum("ij,ij->i", a_q, a_q) - np.einsum("ij,ij->j", kstar, solved)
    if np.any(var < -1e-8):
        raise RuntimeError(f"negative predictive variance {var.min():.3e}")
    return mean, np.maximum(var, 0.0)


def psk_select_dimension(
    x: np.ndarray,
    vbar: np.ndarray,
    noise_diag: np.ndarray,
    reps: np.ndarray,
    d_star_candidates: Sequence[int],
    rng: np.random.Generator,
    split_fraction: float = 0.7,
    **fit_kwargs,
) -> int:
    """Pick D* by one 70/30 holdout: lowest holdout RMSE, ties to smallest D*."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    n_fit = int(round(split_fraction * n))
    if n_fit < 2 or n_fit >= n:
        raise ValueError(f"cannot split {n} points into non-trivial fit/holdout sets")
    perm = rng.permutation(n)
    fit_idx, hold_idx = perm[:n_fit], perm[n_fit:]
    vbar = np.asarray(vbar, dtype=float)
    noise_diag = np.asarray(noise_diag, dtype=float)
    reps = np.asarray(reps, dtype=float)

    best_d, best_rmse = None, math.inf
    for d_star in sorted(d_star_candidates):
        proj = psk_fit(
            x[fit_idx],
            vbar[fit_idx],
            noise_diag[fit_idx] / reps[fit_idx],
            d_star,
            rng=rng,
            **fit_kwargs,
        )
        model = PskModel(
            proj,
            x[fit_idx],
            vbar[fit_idx],
            reps[fit_idx],
            noise_diag[fit_idx],
            noise_fn=lambda _: float(np.mean(noise_diag)),
        )
        pred, _ = psk_predict(model, x[hold_idx])
        rmse = float(np.sqrt(np.mean((pred - vbar[hold_idx]) ** 2)))
        if rmse < best_rmse:
            best_rmse, best_d = rmse, d_star
    assert best_d is not None
    return best_d


def expected_improvement(
    mean: np.ndarray, variance: np.ndarray, incumbent: float
) -> np.ndarray:
    """EI = (mu - v*) Phi(u) + sigma phi(u); at sigma = 0 it is max(mu - v*, 0)."""
    mean = np.asarray(mean, dtype=float)
    sigma = np.sqrt(np.maximum(np.asarray(variance, dtype=float), 0.0))
    improvement = mean - incumbent
    out = np.maximum(improvement, 0.0)
    positive = sigma > 0
    if np.any(positive):
        u = improvement[positive] / sigma[positive]
        out = out.astype(float)
        out[positive] = improvement[positive] * norm.cdf(u) + sigma[positive] * norm.pdf(u)
    return out


@dataclass(frozen=True)
class RefineRow:
    step: int
    x_digest: str
    ei: float
    score: float
    variance_before: float
    uncertainty_running: float


@dataclass
class RefineResult:
    best_x: np.ndarray
    best_score: float
    model: PskModel
    uncertainty_total: float
    trace: list[RefineRow]
    timings: dict[str, float]


def _default_proposals(
    model: PskModel,
    best_x: np.ndarray,
    box: tuple[float, float],
    rng: np.random.Generator,
    n_each: int = 512,
) -> np.ndarray:
    xs, _, _ = model._all_points()
    dim = xs.shape[1]
    cov = perturbation_covariance(xs)
    chol = np.linalg.cholesky(cov + 1e-12 * np.trace(cov) / dim * np.eye(dim))
    perturbed = best_x[None, :] + rng.standard_normal((n_each, dim)) @ chol.T
    perturbed = np.clip(perturbed, box[0], box[1])
    uniform = rng.uniform(box[0], box[1], size=(n_each, dim))
    return np.vstack([perturbed, uniform])


def refine_search(
    model: PskModel,
    budget: int,
    oracle: Callable[[np.ndarray, np.random.Generator], float],
    rng: np.random.Generator,
    box: tuple[float, float] = (-1.0, 1.0),
    proposal_fn: Callable[..., np.ndarray] | None = None,
    retries: int = 3,
    backoff: float = 0.05,
) -> RefineResult:
    """Sequential EI refinement over the latent box.

    Each step scores a proposal batch (perturbations around the incumbent plus
    uniform draws), evaluates the EI argmax once, and accumulates the
    pre-evaluation predictive variance of the chosen point into the
    total-uncertainty figure.
    """
    if budget < 1:
        raise ValueError("refinement budget must be >= 1")
    xs, vs, _ = model._all_points()
    best_idx = int(np.argmax(vs))
    best_x = xs[best_idx].copy()
    best_score = float(vs[best_idx])
    uncertainty = 0.0
    trace: list[RefineRow] = []
    timings: dict[str, float] = {"model": 0.0, "oracle": 0.0}

    for step in range(1, budget + 1):
        started = time.perf_counter()
        if proposal_fn is not None:
            proposals = proposal_fn(model, best_x, box, rng)
        else:
            proposals = _default_proposals(model, best_x, box, rng)
        mean, var = psk_predict(model, proposals)
        ei = expected_improvement(mean, var, model.incumbent)
        pick = int(np.argmax(ei))
        x_new = proposals[pick]
        var_before = float(var[pick])
        timings["model"] += time.perf_counter() - started

        started = time.perf_counter()
        score = evaluate_with_retry(
            lambda: oracle(x_new, rng), retries=retries, backoff=backoff
        )
        timings["oracle"] += time.perf_counter() - started

        model.append(x_new, score)
        uncertainty += var_before
        if score > best_score:
            best_score = score
            best_x = x_new.copy()
        digest = hashlib.sha256(np.ascontiguousarray(x_new).tobytes()).hexdigest()[:12]
        trace.append(
            RefineRow(step, digest, float(ei[pick]), score, var_before, uncertainty)
        )
    return RefineResult(best_x, best_score, model, uncertainty, trace, timings)
