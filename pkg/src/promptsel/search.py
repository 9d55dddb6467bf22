"""Stage 1 — build the feasible candidate set.

Example prompts are encoded into a high-dimensional latent space, the set is
extended by covariance-driven Gaussian perturbations with a similarity-band
acceptance rule, and the accepted latents are projected down to soft prompts
with PCA.  The text encoder/decoder is a plug point; a deterministic stub
(`HashEmbeddingProvider`) ships for tests and offline runs.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

from .core import CandidateSet, LatentVector, SoftPrompt

__all__ = [
    "EmbeddingProvider",
    "HashEmbeddingProvider",
    "SearchConfig",
    "PartialSetError",
    "perturbation_covariance",
    "select_seed",
    "propose_latent",
    "accept_latent",
    "extend_latent_set",
    "pca_project",
    "candidate_set_from_latents",
]


class EmbeddingProvider(Protocol):
    """Text encoder/decoder pair over the latent space."""

    def encode(self, text: str) -> np.ndarray: ...

    def decode(self, values: np.ndarray) -> str: ...


class HashEmbeddingProvider:
    """Deterministic stand-in for a trained text autoencoder.

    Token-hash bag-of-words features are pushed through a fixed seeded
    orthonormal map and squashed with tanh, so every vector lands inside the
    default [-1, 1] box.  decode() returns the text of the nearest previously
    encoded vector, which makes decode(encode(p)) == p exact for stored
    prompts — the only round-trip property the pipeline relies on.
    """

    def __init__(self, dim: int, seed: int = 0, n_features: int = 64) -> None:
        self.dim = dim
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((dim, n_features))
        # Orthonormal columns when dim >= n_features, row-orthonormal otherwise.
        q, _ = np.linalg.qr(raw if dim >= n_features else raw.T)
        self._map = q if dim >= n_features else q.T
        self._n_features = n_features
        self._memory: list[tuple[np.ndarray, str]] = []

    def _features(self, text: str) -> np.ndarray:
        h = np.zeros(self._n_features)
        for tok in text.lower().split():
            digest = hashlib.md5(tok.encode()).digest()
            idx = int.from_bytes(digest[:4], "little") % self._n_features
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            h[idx] += sign
        return h

    def encode(self, text: str) -> np.ndarray:
        values = np.tanh(self._map @ self._features(text))
        self._memory.append((values, text))
        return values

    def decode(self, values: np.ndarray) -> str:
        if not self._memory:
            raise ValueError("decode before any encode: empty memory")
        values = np.asarray(values, dtype=float)
        dists = [float(np.linalg.norm(values - v)) for v, _ in self._memory]
        return self._memory[int(np.argmin(dists))][1]


@dataclass
class SearchConfig:
    """Knobs of the latent-set extension loop."""

    target_count: int
    r1: float = 0.3
    r2: float = 0.9
    box: tuple[float, float] = (-1.0, 1.0)
    ridge: float | None = None  # None -> 1e-8 * trace(cov)/dim
    max_attempts: int = 10_000

    def __post_init__(self) -> None:
        if not 0.0 <= self.r1 < self.r2:
            raise ValueError("need 0 <= r1 < r2")
        if self.box[0] >= self.box[1]:
            raise ValueError("invalid latent box")

    def in_box(self, x: np.ndarray) -> bool:
        lo, hi = self.box
        return bool(np.all(x >= lo) and np.all(x <= hi))


class PartialSetError(RuntimeError):
    """Raised when max_attempts is exhausted; carries the vectors found so far."""

    def __init__(self, message: str, latents: list[LatentVector]) -> None:
        super().__init__(message)
        self.latents = latents


def _latent_matrix(latents: Sequence[LatentVector] | np.ndarray) -> np.ndarray:
    if isinstance(latents, np.ndarray):
        return np.asarray(latents, dtype=float)
    return np.stack([lv.values for lv in latents])


def perturbation_covariance(
    latents: Sequence[LatentVector] | np.ndarray, ridge: float | None = None
) -> np.ndarray:
    """Sample covariance of the current latent set (1/L normalization) + ridge.

    ridge=None applies 1e-8 * trace / dim; pass an explicit value (including 0)
    to override.
    """
    x = _latent_matrix(latents)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 latent vectors for a covariance")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / n
    if ridge is None:
        ridge = 1e-8 * float(np.trace(cov)) / x.shape[1]
    return cov + ridge * np.eye(x.shape[1])


def seed_probabilities(latents: Sequence[LatentVector]) -> np.ndarray:
    """p_l = exp(-selection_count_l) / normalizer."""
    counts = np.array([lv.selection_count for lv in latents], dtype=float)
    logits = -counts
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def select_seed(latents: Sequence[LatentVector], rng: np.random.Generator) -> int:
    """Pick a seed index with probability exp(-count)/normalizer.

    Does not mutate counts: the extension loop increments the chosen seed's
    count on every selection, accepted or not.
    """
    if len(latents) == 0:
        raise ValueError("empty latent set")
    return int(rng.choice(len(latents), p=seed_probabilities(latents)))


def propose_latent(
    seed: LatentVector | np.ndarray, cov: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """seed + V with V ~ N(0, cov), drawn via the Cholesky factor."""
    x = seed.values if isinstance(seed, LatentVector) else np.asarray(seed, dtype=float)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"perturbation covariance is not positive definite: {exc}"
        ) from exc
    return x + chol @ rng.standard_normal(len(x))


def accept_latent(
    candidate: np.ndarray,
    seed_prompt_text: str,
    cfg: SearchConfig,
    provider: EmbeddingProvider,
    similarity: Callable[[str, str], float],
) -> bool:
    """In the box AND decoded-text similarity to the seed strictly inside (r1, r2)."""
    if not cfg.in_box(candidate):
        return False
    text = provider.decode(candidate)
    sim = similarity(text, seed_prompt_text)
    return cfg.r1 < sim < cfg.r2


def extend_latent_set(
    initial: Sequence[str] | Sequence[LatentVector],
    cfg: SearchConfig,
    provider: EmbeddingProvider,
    similarity: Callable[[str, str], float],
    rng: np.random.Generator,
) -> list[LatentVector]:
    """Grow the latent set to cfg.target_count by perturb-and-accept.

    The initial vectors are always the prefix of the result.  Newly accepted
    vectors join the seed pool, and the perturbation covariance is refreshed
    after every acceptance.
    """
    if len(initial) == 0:
        raise ValueError("initial prompt set must be non-empty")
    latents: list[LatentVector] = []
    for item in initial:
        if isinstance(item, LatentVector):
            latents.append(item)
        else:
            latents.append(LatentVector(id=len(latents) + 1, values=provider.encode(item)))
    if cfg.target_count < len(latents):
        raise ValueError("target_count smaller than the initial set")

    cov: np.ndarray | None = None
    attempts = 0
    while len(latents) < cfg.target_count:
        if attempts >= cfg.max_attempts:
            raise PartialSetError(
                f"max_attempts={cfg.max_attempts} exhausted with "
                f"{len(latents)}/{cfg.target_count} vectors",
                latents,
            )
        if cov is None:
            cov = perturbation_covariance(latents, ridge=cfg.ridge)
        idx = select_seed(latents, rng)
        latents[idx].selection_count += 1
        proposal = propose_latent(latents[idx], cov, rng)
        try:
            seed_text = provider.decode(latents[idx].values)
            ok = accept_latent(proposal, seed_text, cfg, provider, similarity)
        except Exception:
            ok = False
        if ok:
            latents.append(LatentVector(id=len(latents) + 1, values=proposal))
            cov = None  # set changed: recompute before the next proposal
        else:
            attempts += 1
    return latents


def pca_project(
    latents: Sequence[LatentVector] | np.ndarray, d: int
) -> tuple[np.ndarray, np.ndarray]:
    """Project latents to d dimensions along the top principal directions.

    Returns (A, Z): A is (d, dim) with orthonormal rows ordered by descending
    eigenvalue of the 1/N-normalized sample covariance; Z rows are z_n = A X_n
    (uncentered, matching the projection used downstream).  d is clamped to
    the numerical rank with a warning when the data cannot support it.

    The eigendecomposition runs on the dim x dim covariance when dim <= N and
    on the N x N Gram matrix otherwise (identical spectra, cheaper).
    """
    x = _latent_matrix(latents)
    n, dim = x.shape
    if n < 2:
        raise ValueError("need at least 2 points for PCA")
    if d < 1:
        raise ValueError("d must be >= 1")
    centered = x - x.mean(axis=0)
    if dim <= n:
        cov = centered.T @ centered / n
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals = eigvals[order]
        eigvecs = eigvecs[:, order]
    else:
        gram = centered @ centered.T / n
        gvals, gvecs = np.linalg.eigh(gram)
        order = np.argsort(gvals)[::-1]
        gvals = gvals[order]
        gvecs = gvecs[:, order]
        keep = gvals > 0
        directions = centered.T @ gvecs[:, keep]
        norms = np.linalg.norm(directions, axis=0)
        positive = norms > 0
        eigvals = gvals[keep][positive]
        eigvecs = directions[:, positive] / norms[positive]

    lam_max = float(eigvals[0]) if len(eigvals) else 0.0
    if lam_max <= 0.0:
        raise ValueError("degenerate data: zero covariance, no principal directions")
    rank = int(np.sum(eigvals > 1e-10 * lam_max))
    if d > rank:
        warnings.warn(
            f"requested d={d} exceeds data rank {rank}; clamping to {rank}",
            stacklevel=2,
        )
        d = rank

    a = eigvecs[:, :d].T.copy()
    # Deterministic sign: largest-magnitude component of each row positive.
    for row in a:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return a, x @ a.T


def candidate_set_from_latents(
    latents: Sequence[LatentVector],
    d: int,
    provider: EmbeddingProvider | None = None,
    n_initial: int | None = None,
) -> CandidateSet:
    """Bundle a projected latent set into a CandidateSet.

    n_initial marks the first candidates as derived from the initial example
    prompts (the warm-up stage prefers those when present).
    """
    a, z = pca_project(latents, d)
    prompts = []
    for i, lv in enumerate(latents):
        text = provider.decode(lv.values) if provider is not None else None
        prompts.append(SoftPrompt(id=i + 1, z=z[i], latent_id=lv.id, prompt_text=text))
    initial = tuple(range(1, n_initial + 1)) if n_initial else None
    return CandidateSet(
        prompts=prompts,
        projection=a,
        latents=list(latents),
        initial_indices=initial,
    )
