"""Score observation sources.

Three families: pure text-similarity scoring (TF / TF-IDF cosine), a synthetic
ground-truth oracle used by every verification harness, and an HTTP evaluator
that scores a prompt by querying a chat-completions-style endpoint against a
baseline set of input/output pairs.

All randomness flows through injected ``numpy.random.Generator`` instances and
the HTTP transport is an injectable callable, so everything here is mockable
and deterministic under a fixed seed.
"""

from __future__ import annotations

import json
import math
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "tokenize",
    "tf_vector",
    "tfidf_vectors",
    "cosine_similarity",
    "score_texts",
    "ScoreFunctionConfig",
    "BaselineSet",
    "SyntheticOracle",
    "make_landscape",
    "LlmEvaluatorConfig",
    "LlmEvaluator",
    "EvalRecord",
    "TransportError",
    "ResponseParseError",
    "llm_evaluate",
]

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return [tok for tok in _TOKEN_SPLIT.split(text.lower()) if tok]


def tf_vector(text: str, vocabulary: Sequence[str]) -> np.ndarray:
    """Term-frequency counts of each vocabulary token in ``text``.

    Out-of-vocabulary tokens are ignored.
    """
    if len(vocabulary) == 0:
        raise ValueError("vocabulary must be non-empty")
    index = {tok: i for i, tok in enumerate(vocabulary)}
    out = np.zeros(len(vocabulary))
    for tok in tokenize(text):
        i = index.get(tok)
        if i is not None:
            out[i] += 1.0
    return out


def tfidf_vectors(corpus: Sequence[str]) -> tuple[list[str], np.ndarray]:
    """TF-IDF vectors for a corpus, with smoothed IDF = ln((1+M)/(1+df)) + 1.

    Returns the sorted vocabulary and an (M, |vocab|) matrix.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must contain at least one document")
    docs = [tokenize(text) for text in corpus]
    vocabulary = sorted({tok for doc in docs for tok in doc})
    vectors = np.stack([tf_vector(text, vocabulary) for text in corpus]) if vocabulary else np.zeros((len(corpus), 0))
    df = (vectors > 0).sum(axis=0)
    idf = np.log((1.0 + len(corpus)) / (1.0 + df)) + 1.0
    return vocabulary, vectors * idf


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """cos of the angle between a and b; zero vectors have undefined similarity."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("undefined similarity: zero vector")
    return float(a @ b / (na * nb))


@dataclass
class ScoreFunctionConfig:
    """How generated text is scored against a reference.

    ``vectorizer`` is "tf" (vocabulary from the two texts being compared) or
    "tfidf" (vocabulary and IDF weights from ``corpus``).
    """

    vectorizer: str = "tf"
    corpus: Sequence[str] | None = None
    _idf_cache: tuple[list[str], np.ndarray] | None = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if self.vectorizer not in ("tf", "tfidf"):
            raise ValueError(f"unknown vectorizer {self.vectorizer!r}")
        if self.vectorizer == "tfidf" and not self.corpus:
            raise ValueError("tfidf vectorizer requires a baseline corpus")

    def _corpus_idf(self) -> tuple[list[str], np.ndarray]:
        if self._idf_cache is None:
            assert self.corpus is not None
            docs = [tokenize(t) for t in self.corpus]
            vocabulary = sorted({tok for doc in docs for tok in doc})
            m = len(self.corpus)
            df = np.array(
                [sum(1 for doc in docs if tok in doc) for tok in vocabulary], dtype=float
            )
            idf = np.log((1.0 + m) / (1.0 + df)) + 1.0
            self._idf_cache = (vocabulary, idf)
        return self._idf_cache


def score_texts(generated: str, reference: str, cfg: ScoreFunctionConfig | None = None) -> float:
    """Similarity score in [0, 1] between generated and reference text.

    TF mode builds the vocabulary from the two texts; TF-IDF mode uses the
    baseline corpus vocabulary and IDF weights.  Texts sharing no tokens score
    0 rather than raising.
    """
    if not generated or not reference:
        raise ValueError("both texts must be non-empty")
    cfg = cfg or ScoreFunctionConfig()
    if cfg.vectorizer == "tf":
        vocabulary = sorted(set(tokenize(generated)) | set(tokenize(reference)))
        if not vocabulary:
            return 0.0
        a = tf_vector(generated, vocabulary)
        b = tf_vector(reference, vocabulary)
    else:
        vocabulary, idf = cfg._corpus_idf()
        if not vocabulary:
            return 0.0
        a = tf_vector(generated, vocabulary) * idf
        b = tf_vector(reference, vocabulary) * idf
    if not a.any() or not b.any():
        return 0.0
    return float(min(1.0, max(0.0, cosine_similarity(a, b))))


@dataclass
class BaselineSet:
    """Task-specific reference (input, output) text pairs."""

    pairs: list[tuple[str, str]]

    def __post_init__(self) -> None:
        if len(self.pairs) == 0:
            raise ValueError("baseline set must contain at least one pair")
        for x, y in self.pairs:
            if not x or not y:
                raise ValueError("baseline texts must be non-empty")

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_json(cls, text: str) -> "BaselineSet":
        doc = json.loads(text)
        return cls(pairs=[(d["input"], d["reference"]) for d in doc])

    def corpus(self) -> list[str]:
        return [y for _, y in self.pairs]


# ---------------------------------------------------------------------------
# Synthetic ground truth
# ---------------------------------------------------------------------------


def make_landscape(name: str, dim: int, rng: np.random.Generator) -> Callable[[np.ndarray], float]:
    """Named ground-truth mean functions over soft-prompt space.

    linear:          v(z) = w.z with w ~ N(0, I/dim)
    quadratic-bowl:  v(z) = 1 - ||z - c||^2 / dim, c ~ U[-0.5, 0.5]^dim
    multi-modal:     sum of 3 Gaussian bumps with random centers/heights
    """
    if name == "linear":
        w = rng.normal(size=dim) / math.sqrt(dim)
        return lambda z: float(np.asarray(z, dtype=float) @ w)
    if name == "quadratic-bowl":
        c = rng.uniform(-0.5, 0.5, size=dim)
        return lambda z: float(1.0 - np.sum((np.asarray(z, dtype=float) - c) ** 2) / dim)
    if name == "multi-modal":
        centers = rng.uniform(-1.0, 1.0, size=(3, dim))
        heights = rng.uniform(0.5, 1.0, size=3)
        width2 = 2.0 * (0.35**2) * dim

        def v(z: np.ndarray) -> float:
            d2 = np.sum((centers - np.asarray(z, dtype=float)) ** 2, axis=1)
            return float(np.sum(heights * np.exp(-d2 / width2)))

        return v
    raise ValueError(f"unknown landscape {name!r}")


@dataclass
class SyntheticOracle:
    """Ground-truth mean function plus Gaussian observation noise.

    ``noise_std`` is a scalar or a per-point callable.  Scores are deliberately
    NOT clamped: the verification suites rely on the exact Gaussian model.
    """

    mean_fn: Callable[[np.ndarray], float]
    noise_std: float | Callable[[np.ndarray], float] = 0.0
    name: str = "synthetic"

    def noise_at(self, z: np.ndarray) -> float:
        s = self.noise_std(z) if callable(self.noise_std) else self.noise_std
        if s < 0:
            raise ValueError("noise std must be >= 0")
        return float(s)

    def evaluate(self, z: np.ndarray, rng: np.random.Generator) -> float:
        v = self.mean_fn(np.asarray(z, dtype=float))
        s = self.noise_at(z)
        return float(v + rng.normal(0.0, s)) if s > 0 else float(v)

    def __call__(self, prompt, rng: np.random.Generator) -> float:
        """Adapter so the sequential loops can call the oracle on a SoftPrompt."""
        return self.evaluate(prompt.z, rng)


def synthetic_evaluate(oracle: SyntheticOracle, z: np.ndarray, rng: np.random.Generator) -> float:
    return oracle.evaluate(z, rng)


# ---------------------------------------------------------------------------
# HTTP language-model evaluator
# ---------------------------------------------------------------------------


class TransportError(RuntimeError):
    """Network-level failure (connect, timeout, HTTP status, missing auth)."""


class ResponseParseError(ValueError):
    """The endpoint answered but not in the expected shape."""


@dataclass
class LlmEvaluatorConfig:
    endpoint: str
    model: str
    auth_env: str = "LLM_API_TOKEN"
    timeout: float = 30.0
    temperature: float = 0.0
    max_retries: int = 3

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")


@dataclass(frozen=True)
class EvalRecord:
    """One evaluator call: which baseline pair, response id, latency, score."""

    m: int
    response_id: str | None
    latency_ms: float
    score: float


Transport = Callable[[dict, LlmEvaluatorConfig], dict]


def _default_transport(payload: dict, cfg: LlmEvaluatorConfig) -> dict:
    import httpx

    token = os.environ.get(cfg.auth_env)
    if not token:
        raise TransportError(f"auth token env var {cfg.auth_env} is not set")
    try:
        resp = httpx.post(
            cfg.endpoint,
            json=payload,
            headers={"Authorization": f"Bearer {token}"},
            timeout=cfg.timeout,
        )
        resp.raise_for_status()
        return resp.json()
    except httpx.HTTPError as exc:  # connect, timeout, status, decode
        raise TransportError(str(exc)) from exc


def _extract_text(response: dict) -> tuple[str, str | None]:
    try:
        choice = response["choices"][0]
    except (KeyError, IndexError, TypeError) as exc:
        raise ResponseParseError(f"no choices in response: {response!r}") from exc
    text = None
    if isinstance(choice, dict):
        message = choice.get("message")
        if isinstance(message, dict):
            text = message.get("content")
        if text is None:
            text = choice.get("text")
    if not isinstance(text, str) or not text:
        raise ResponseParseError(f"no text in first choice: {choice!r}")
    return text, response.get("id")


def llm_evaluate(
    prompt_text: str,
    baseline: BaselineSet,
    cfg: LlmEvaluatorConfig,
    score_cfg: ScoreFunctionConfig | None = None,
    rng: np.random.Generator | None = None,
    transport: Transport | None = None,
    trace: list[EvalRecord] | None = None,
) -> float:
    """One evaluation: pick a baseline pair uniformly, query, score in [0, 1]."""
    if rng is None:
        rng = np.random.default_rng()
    transport = transport or _default_transport
    m = int(rng.integers(len(baseline)))
    x_m, y_m = baseline.pairs[m]
    payload = {
        "model": cfg.model,
        "messages": [{"role": "user", "content": f"{prompt_text}\n{x_m}"}],
        "temperature": cfg.temperature,
    }
    started = time.perf_counter()
    response = transport(payload, cfg)
    latency_ms = (time.perf_counter() - started) * 1e3
    text, response_id = _extract_text(response)
    try:
        score = score_texts(text, y_m, score_cfg)
    except ValueError:
        score = 0.0
    if trace is not None:
        trace.append(EvalRecord(m=m, response_id=response_id, latency_ms=latency_ms, score=score))
    return score


@dataclass
class LlmEvaluator:
    """Callable oracle adapter: evaluates a SoftPrompt's text via the endpoint."""

    baseline: BaselineSet
    cfg: LlmEvaluatorConfig
    score_cfg: ScoreFunctionConfig | None = None
    transport: Transport | None = None
    trace: list[EvalRecord] = field(default_factory=list)

    def __call__(self, prompt, rng: np.random.Generator) -> float:
        if prompt.prompt_text is None:
            raise ValueError(f"candidate {prompt.id} has no prompt text to evaluate")
        return llm_evaluate(
            prompt.prompt_text,
            self.baseline,
            self.cfg,
            self.score_cfg,
            rng,
            transport=self.transport,
            trace=self.trace,
        )
