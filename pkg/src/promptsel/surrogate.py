"""Bayesian parametric surrogates f(z; W) over the soft-prompt space.

Three families share one interface: Bayesian linear regression on an explicit
feature map, a finite-rank Gaussian process (random Fourier features
approximating an RBF kernel, making the weight-space view exact), and a small
Bayesian neural network.  Priors are independent zero-mean Gaussians on W.

The log posterior follows the heteroscedastic Gaussian likelihood

    sum_{n,m} -(v_nm - f(z_n; W))^2 / (2 sigma_n^2)  +  log pi(W)

computed from the observation ledger's per-candidate sufficient statistics.
Gradients are analytic (manual backprop for the BNN); finite differences
appear only in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import CandidateSet, ObservationLog

__all__ = [
    "FeatureMap",
    "IdentityFeatures",
    "RandomFourierFeatures",
    "median_heuristic",
    "SurrogateSpec",
    "GaussianPosterior",
    "forward",
    "forward_batch",
    "log_posterior_density",
    "grad_log_posterior",
    "blr_exact_posterior",
    "gp_function_space_predict",
    "rbf_kernel",
    "feature_kernel",
]


# ---------------------------------------------------------------------------
# Feature maps
# ---------------------------------------------------------------------------


class FeatureMap:
    """Maps z (or a batch of z) to a feature vector of length n_features."""

    n_features: int

    def transform(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class IdentityFeatures(FeatureMap):
    """phi(z) = z."""

    dim: int

    @property
    def n_features(self) -> int:  # type: ignore[override]
        return self.dim

    def transform(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return z


def median_heuristic(points: np.ndarray) -> float:
    """Median nonzero pairwise euclidean distance; 1.0 if degenerate."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if len(points) < 2:
        return 1.0
    sq = np.sum(points**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    d = np.sqrt(np.maximum(d2[np.triu_indices(len(points), k=1)], 0.0))
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


class RandomFourierFeatures(FeatureMap):
    """Cosine features phi(z) = sqrt(2/p) cos(Omega z + b) approximating RBF.

    E[phi(z).phi(z')] = exp(-||z - z'||^2 / (2 l^2)) with Omega ~ N(0, I/l^2).
    """

    def __init__(self, omega: np.ndarray, phase: np.ndarray) -> None:
        self.omega = np.asarray(omega, dtype=float)
        self.phase = np.asarray(phase, dtype=float)

    @classmethod
    def make(
        cls,
        dim: int,
        n_features: int = 256,
        lengthscale: float | None = None,
        reference_points: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> "RandomFourierFeatures":
        if lengthscale is None:
            if reference_points is None:
                raise ValueError("need a lengthscale or reference points for the median heuristic")
            lengthscale = median_heuristic(reference_points)
        rng = rng or np.random.default_rng(0)
        omega = rng.standard_normal((n_features, dim)) / lengthscale
        phase = rng.uniform(0.0, 2.0 * math.pi, size=n_features)
        return cls(omega, phase)

    @property
    def n_features(self) -> int:  # type: ignore[override]
        return self.omega.shape[0]

    def transform(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        proj = z @ self.omega.T + self.phase
        return math.sqrt(2.0 / self.n_features) * np.cos(proj)


# ---------------------------------------------------------------------------
# Surrogate families
# ---------------------------------------------------------------------------

_ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]] = {
    # name -> (activation, derivative-as-function-of-preactivation)
    "tanh": (np.tanh, lambda s: 1.0 - np.tanh(s) ** 2),
    "relu": (lambda s: np.maximum(s, 0.0), lambda s: (s > 0.0).astype(float)),
}


@dataclass
class SurrogateSpec:
    """Which parametric family, its feature map / architecture, and the prior.

    kind "blr" and "gp" need feature_map; kind "bnn" needs widths like
    (D, 64, 1) and an activation name.  prior_scale is the prior std of every
    parameter (independent N(0, prior_scale^2)).
    """

    kind: str
    feature_map: FeatureMap | None = None
    widths: tuple[int, ...] | None = None
    activation: str = "tanh"
    prior_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("blr", "gp", "bnn"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.kind in ("blr", "gp"):
            if self.feature_map is None:
                raise ValueError(f"{self.kind} needs a feature map")
        else:
            if self.widths is None or len(self.widths) < 2 or self.widths[-1] != 1:
                raise ValueError("bnn widths must end in 1, e.g. (D, 64, 1)")
            if self.activation not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {self.activation!r}")
        if self.prior_scale <= 0:
            raise ValueError("prior_scale must be > 0")

    @classmethod
    def bnn(cls, dim: int, hidden: int = 64, activation: str = "tanh", prior_scale: float = 1.0) -> "SurrogateSpec":
        return cls(kind="bnn", widths=(dim, hidden, 1), activation=activation, prior_scale=prior_scale)

    @property
    def n_params(self) -> int:
        if self.kind in ("blr", "gp"):
            assert self.feature_map is not None
            return self.feature_map.n_features
        assert self.widths is not None
        return sum((m_in + 1) * m_out for m_in, m_out in zip(self.widths[:-1], self.widths[1:]))

    def unpack(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat BNN parameter vector into (weight, bias) per layer."""
        assert self.widths is not None
        w = np.asarray(w, dtype=float)
        layers = []
        pos = 0
        for m_in, m_out in zip(self.widths[:-1], self.widths[1:]):
            wmat = w[pos : pos + m_in * m_out].reshape(m_out, m_in)
            pos += m_in * m_out
            bias = w[pos : pos + m_out]
            pos += m_out
            layers.append((wmat, bias))
        if pos != len(w):
            raise ValueError(f"parameter vector length {len(w)} != expected {self.n_params}")
        return layers


@dataclass
class GaussianPosterior:
    """Exact Gaussian posterior over the parameter vector."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.covariance, dtype=float)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("posterior covariance must be symmetric")
        self.covariance = 0.5 * (cov + cov.T)

    def predictive(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance of f = phi.W at rows of a feature matrix."""
        features = np.atleast_2d(np.asarray(features, dtype=float))
        mean = features @ self.mean
        var = np.einsum("ij,jk,ik->i", features, self.covariance, features)
        return mean, np.maximum(var, 0.0)


# ---------------------------------------------------------------------------
# Forward evaluation
# ---------------------------------------------------------------------------


def forward(spec: SurrogateSpec, w: np.ndarray, z: np.ndarray) -> float:
    """Deterministic model value f(z; W)."""
    return float(forward_batch(spec, np.atleast_2d(w), np.atleast_2d(z))[0, 0])


def forward_batch(spec: SurrogateSpec, ws: np.ndarray, zs: np.ndarray) -> np.ndarray:
    """f(z_n; W_k) for all (k, n): shape (K, N)."""
    ws = np.atleast_2d(np.asarray(ws, dtype=float))
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    if ws.shape[1] != spec.n_params:
        raise ValueError(f"parameter length {ws.shape[1]} != expected {spec.n_params}")
    if spec.kind in ("blr", "gp"):
        assert spec.feature_map is not None
        phi = np.atleast_2d(spec.feature_map.transform(zs))
        return ws @ phi.T
    act, _ = _ACTIVATIONS[spec.activation]
    out = np.empty((ws.shape[0], zs.shape[0]))
    for k, w in enumerate(ws):
        layers = spec.unpack(w)
        h = zs
        for wmat, bias in layers[:-1]:
            h = act(h @ wmat.T + bias)
        wmat, bias = layers[-1]
        out[k] = (h @ wmat.T + bias)[:, 0]
    return out


def _bnn_forward_cache(
    spec: SurrogateSpec, w: np.ndarray, zs: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Forward pass keeping pre-activations and activations for backprop."""
    act, _ = _ACTIVATIONS[spec.activation]
    layers = spec.unpack(w)
    hs = [zs]
    pres = []
    h = zs
    for wmat, bias in layers[:-1]:
        s = h @ wmat.T + bias
        pres.append(s)
        h = act(s)
        hs.append(h)
    wmat, bias = layers[-1]
    f = (h @ wmat.T + bias)[:, 0]
    return f, hs, pres


def _bnn_backward(
    spec: SurrogateSpec,
    w: np.ndarray,
    zs: np.ndarray,
    dl_df: np.ndarray,
) -> np.ndarray:
    """Gradient of sum_n dl_df[n] * f(z_n; W) with respect to flat W."""
    _, deriv = _ACTIVATIONS[spec.activation]
    layers = spec.unpack(w)
    _, hs, pres = _bnn_forward_cache(spec, w, zs)
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]

    delta = dl_df[:, None]  # (n, 1) at the linear output
    wmat, _ = layers[-1]
    grads[-1] = (delta.T @ hs[-1], delta.sum(axis=0))
    upstream = delta @ wmat  # (n, width of last hidden)
    for li in range(len(layers) - 2, -1, -1):
        delta = upstream * deriv(pres[li])
        wmat, _ = layers[li]
        grads[li] = (delta.T @ hs[li], delta.sum(axis=0))
        if li > 0:
            upstream = delta @ wmat
    return np.concatenate([np.concatenate([g.ravel(), b.ravel()]) for g, b in grads])


# ---------------------------------------------------------------------------
# Log posterior and its gradient
# ---------------------------------------------------------------------------


def _evaluated_stats(
    log: ObservationLog, candidates: CandidateSet | np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(indices, z rows, counts, sums, sums of squares) for evaluated candidates."""
    zmat = candidates.z_matrix if isinstance(candidates, CandidateSet) else np.atleast_2d(candidates)
    ids = log.evaluated_candidates()
    idx = np.array(ids, dtype=int)
    zs = zmat[idx - 1]
    counts = np.array([log.count(n) for n in ids], dtype=float)
    sums = np.array([log.score_sum(n) for n in ids])
    sumsqs = np.array([log.score_sumsq(n) for n in ids])
    return idx, zs, counts, sums, sumsqs


def _noise_for(noise_variances: np.ndarray | Sequence[float], idx: np.ndarray) -> np.ndarray:
    nv = np.asarray(noise_variances, dtype=float)
    out = nv[idx - 1]
    if np.any(out <= 0):
        raise ValueError("noise variances must be > 0 for every observed candidate")
    return out


def log_posterior_density(
    spec: SurrogateSpec,
    w: np.ndarray,
    log: ObservationLog,
    candidates: CandidateSet | np.ndarray,
    noise_variances: np.ndarray | Sequence[float],
) -> float:
    """Heteroscedastic Gaussian log likelihood plus log prior, up to a constant."""
    w = np.asarray(w, dtype=float)
    prior = -0.5 * float(w @ w) / spec.prior_scale**2
    if log.round == 0:
        return prior
    idx, zs, counts, sums, sumsqs = _evaluated_stats(log, candidates)
    noise = _noise_for(noise_variances, idx)
    f = forward_batch(spec, w[None, :], zs)[0]
    # sum_m (v - f)^2 = sumsq - 2 f sum + r f^2, per candidate
    sq = sumsqs - 2.0 * f * sums + counts * f**2
    return float(np.sum(-sq / (2.0 * noise)) + prior)


def grad_log_posterior(
    spec: SurrogateSpec,
    w: np.ndarray,
    log: ObservationLog,
    candidates: CandidateSet | np.ndarray,
    noise_variances: np.ndarray | Sequence[float],
) -> np.ndarray:
    """Analytic gradient of log_posterior_density with respect to W."""
    w = np.asarray(w, dtype=float)
    grad = -w / spec.prior_scale**2
    if log.round == 0:
        return grad
    idx, zs, counts, sums, sumsqs = _evaluated_stats(log, candidates)
    noise = _noise_for(noise_variances, idx)
    f = forward_batch(spec, w[None, :], zs)[0]
    dl_df = (sums - counts * f) / noise
    if spec.kind in ("blr", "gp"):
        assert spec.feature_map is not None
        phi = np.atleast_2d(spec.feature_map.transform(zs))
        grad = grad + phi.T @ dl_df
    else:
        grad = grad + _bnn_backward(spec, w, zs, dl_df)
    return grad


# ---------------------------------------------------------------------------
# Conjugate posterior (BLR / finite-rank GP weight space)
# ---------------------------------------------------------------------------


def blr_exact_posterior(
    spec: SurrogateSpec,
    log: ObservationLog,
    candidates: CandidateSet | np.ndarray,
    noise_variances: np.ndarray | Sequence[float] | None = None,
) -> GaussianPosterior:
    """Closed-form Gaussian posterior over the weights of a linear-in-features model.

    Empty data returns the prior N(0, prior_scale^2 I).
    """
    if spec.kind not in ("blr", "gp"):
        raise ValueError("exact posterior requires a linear-in-features surrogate")
    assert spec.feature_map is not None
    p = spec.feature_map.n_features
    prior_prec = 1.0 / spec.prior_scale**2
    if log.round == 0:
        return GaussianPosterior(np.zeros(p), np.eye(p) / prior_prec)
    if noise_variances is None:
        raise ValueError("noise variances required once data is present")
    idx, zs, counts, sums, _ = _evaluated_stats(log, candidates)
    noise = _noise_for(noise_variances, idx)
    phi = np.atleast_2d(spec.feature_map.transform(zs))
    lam = prior_prec * np.eye(p) + (phi.T * (counts / noise)) @ phi
    rhs = phi.T @ (sums / noise)
    c, low = cho_factor(lam)
    cov = cho_solve((c, low), np.eye(p))
    mean = cho_solve((c, low), rhs)
    return GaussianPosterior(mean, 0.5 * (cov + cov.T))


# ---------------------------------------------------------------------------
# Function-space GP prediction
# ---------------------------------------------------------------------------


def rbf_kernel(lengthscale: float, variance: float = 1.0) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """k(a, b) = variance * exp(-||a - b||^2 / (2 lengthscale^2))."""

    def k(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        d2 = np.sum(a**2, axis=1)[:, None] + np.sum(b**2, axis=1)[None, :] - 2.0 * a @ b.T
        return variance * np.exp(-np.maximum(d2, 0.0) / (2.0 * lengthscale**2))

    return k


def feature_kernel(fm: FeatureMap) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Finite-rank kernel K(a, b) = phi(a).phi(b)."""

    def k(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        pa = np.atleast_2d(fm.transform(np.atleast_2d(a)))
        pb = np.atleast_2d(fm.transform(np.atleast_2d(b)))
        return pa @ pb.T

    return k


def gp_function_space_predict(
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray],
    z_train: np.ndarray,
    y: np.ndarray,
    noise: float | np.ndarray,
    z_query: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Function-space GP posterior mean/variance at the query points.

    mean = k*^T (K + S)^-1 y,  var = k(q, q) - k*^T (K + S)^-1 k*, where S is
    sigma^2 I for a scalar ``noise`` or diag(noise) per observation.  With
    zero observations this is the prior (0, k(q, q)).
    """
    z_query = np.atleast_2d(np.asarray(z_query, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        prior_var = np.diag(kernel(z_query, z_query)).copy()
        return np.zeros(len(z_query)), prior_var
    z_train = np.atleast_2d(np.asarray(z_train, dtype=float))
    kmat = kernel(z_train, z_train)
    s = np.full(len(z_train), float(noise)) if np.isscalar(noise) else np.asarray(noise, dtype=float)
    if np.any(s < 0):
        raise ValueError("noise must be >= 0")
    sys = kmat + np.diag(s)
    try:
        c, low = cho_factor(sys)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * float(np.mean(np.diag(sys)))
        try:
            c, low = cho_factor(sys + jitter * np.eye(len(sys)))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"kernel matrix not positive definite: {exc}") from exc
    kstar = kernel(z_train, z_query)
    mean = kstar.T @ cho_solve((c, low), y)
    solved = cho_solve((c, low), kstar)
    var = np.diag(kernel(z_query, z_query)) - np.einsum("ij,ij->j", kstar, solved)
    return mean, np.maximum(var, 0.0)
