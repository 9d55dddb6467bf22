"""Problem model and observation ledger shared by all stages.

Candidates are soft prompts ``z_n`` (moderate-dimensional vectors) linked to the
high-dimensional latent vectors they were projected from.  The ``ObservationLog``
is the running dataset of (candidate, score) pairs with per-candidate counts —
the single source of truth for sample means and the final selection.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

__all__ = [
    "LatentVector",
    "SoftPrompt",
    "CandidateSet",
    "Observation",
    "ObservationLog",
]


@dataclass
class LatentVector:
    """A high-dimensional prompt encoding, with its seed-selection count."""

    id: int
    values: np.ndarray
    selection_count: int = 0

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1:
            raise ValueError("latent values must be a 1-D vector")


@dataclass
class SoftPrompt:
    """A projected candidate: ``z = A @ X`` plus provenance."""

    id: int
    z: np.ndarray
    latent_id: int | None = None
    prompt_text: str | None = None

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z, dtype=float)


@dataclass
class CandidateSet:
    """The N candidates under optimization, with projection and noise metadata.

    ``noise_variance[n-1]`` holds the per-candidate observation variance once the
    warm-up stage has populated it (via the fitted variance model).
    ``initial_indices`` marks candidates derived from the initial example prompts,
    which the warm-up stage prefers when present.
    """

    prompts: list[SoftPrompt]
    projection: np.ndarray
    noise_variance: np.ndarray | None = None
    latents: list[LatentVector] = field(default_factory=list)
    initial_indices: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        self.projection = np.asarray(self.projection, dtype=float)
        ids = [p.id for p in self.prompts]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError("prompt ids must be distinct and contiguous 1..N")

    def __len__(self) -> int:
        return len(self.prompts)

    @property
    def z_matrix(self) -> np.ndarray:
        """All candidate vectors stacked, shape (N, D), row n-1 is z_n."""
        return np.stack([p.z for p in self.prompts])

    def prompt(self, n: int) -> SoftPrompt:
        if not 1 <= n <= len(self.prompts):
            raise ValueError(f"candidate index {n} out of range 1..{len(self.prompts)}")
        return self.prompts[n - 1]

    def to_dict(self) -> dict:
        return {
            "prompts": [
                {
                    "id": p.id,
                    "z": p.z.tolist(),
                    "latent_id": p.latent_id,
                    "prompt_text": p.prompt_text,
                }
                for p in self.prompts
            ],
            "projection": np.asarray(self.projection).tolist(),
            "noise_variance": None
            if self.noise_variance is None
            else np.asarray(self.noise_variance).tolist(),
            "latents": [
                {
                    "id": lv.id,
                    "values": lv.values.tolist(),
                    "selection_count": lv.selection_count,
                }
                for lv in self.latents
            ],
            "initial_indices": None
            if self.initial_indices is None
            else list(self.initial_indices),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CandidateSet":
        return cls(
            prompts=[
                SoftPrompt(
                    id=int(p["id"]),
                    z=np.asarray(p["z"], dtype=float),
                    latent_id=None if p.get("latent_id") is None else int(p["latent_id"]),
                    prompt_text=p.get("prompt_text"),
                )
                for p in doc["prompts"]
            ],
            projection=np.asarray(doc["projection"], dtype=float),
            noise_variance=None
            if doc.get("noise_variance") is None
            else np.asarray(doc["noise_variance"], dtype=float),
            latents=[
                LatentVector(
                    id=int(lv["id"]),
                    values=np.asarray(lv["values"], dtype=float),
                    selection_count=int(lv["selection_count"]),
                )
                for lv in doc.get("latents", [])
            ],
            initial_indices=None
            if doc.get("initial_indices") is None
            else tuple(int(i) for i in doc["initial_indices"]),
        )


@dataclass(frozen=True)
class Observation:
    candidate: int
    score: float
    round: int


class _KahanSum:
    """Compensated running sum, so recomputation from raw scores agrees to 1e-12."""

    __slots__ = ("value", "_comp")

    def __init__(self) -> None:
        self.value = 0.0
        self._comp = 0.0

    def add(self, x: float) -> None:
        y = x - self._comp
        t = self.value + y
        self._comp = (t - self.value) - y
        self.value = t


class ObservationLog:
    """Append-only ledger of scores with per-candidate running moments.

    The only mutator is :meth:`record_observation`; every query is pure.
    """

    def __init__(self, n_candidates: int | None = None) -> None:
        if n_candidates is not None and n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        self.n_candidates = n_candidates
        self._observations: list[Observation] = []
        self._counts: dict[int, int] = {}
        self._sums: dict[int, _KahanSum] = {}
        self._sumsqs: dict[int, _KahanSum] = {}

    # -- mutation ---------------------------------------------------------

    def record_observation(self, n: int, score: float) -> "ObservationLog":
        if n < 1 or (self.n_candidates is not None and n > self.n_candidates):
            hi = self.n_candidates if self.n_candidates is not None else "inf"
            raise ValueError(f"candidate index {n} out of range 1..{hi}")
        score = float(score)
        if not math.isfinite(score):
            raise ValueError(f"non-finite score {score!r} rejected")
        self._observations.append(
            Observation(candidate=n, score=score, round=len(self._observations) + 1)
        )
        self._counts[n] = self._counts.get(n, 0) + 1
        self._sums.setdefault(n, _KahanSum()).add(score)
        self._sumsqs.setdefault(n, _KahanSum()).add(score * score)
        return self

    # -- queries ----------------------------------------------------------

    @property
    def observations(self) -> tuple[Observation, ...]:
        return tuple(self._observations)

    @property
    def round(self) -> int:
        """Number of observations recorded so far (the current t)."""
        return len(self._observations)

    def count(self, n: int) -> int:
        return self._counts.get(n, 0)

    def counts(self, n_candidates: int | None = None) -> np.ndarray:
        """r_n(t) for n = 1..N as an array (index 0 is candidate 1)."""
        n_candidates = n_candidates or self.n_candidates
        if n_candidates is None:
            n_candidates = max(self._counts, default=0)
        out = np.zeros(n_candidates, dtype=int)
        for n, c in self._counts.items():
            if n <= n_candidates:
                out[n - 1] = c
        return out

    def evaluated_candidates(self) -> list[int]:
        return sorted(self._counts)

    def score_sum(self, n: int) -> float:
        return self._sums[n].value if n in self._sums else 0.0

    def score_sumsq(self, n: int) -> float:
        return self._sumsqs[n].value if n in self._sumsqs else 0.0

    def sample_mean(self, n: int) -> float:
        r = self.count(n)
        if r == 0:
            raise ValueError(f"candidate {n} never evaluated")
        return self._sums[n].value / r

    def sample_variance(self, n: int) -> float:
        """Unbiased sample variance (r-1 denominator) of the scores at n."""
        r = self.count(n)
        if r < 2:
            raise ValueError(f"candidate {n} needs >= 2 observations, has {r}")
        scores = [o.score for o in self._observations if o.candidate == n]
        mean = self.sample_mean(n)
        return math.fsum((s - mean) ** 2 for s in scores) / (r - 1)

    def scores_for(self, n: int) -> list[float]:
        return [o.score for o in self._observations if o.candidate == n]

    def final_selection(self) -> int:
        """argmax of sample means over evaluated candidates; ties -> lowest index."""
        if not self._counts:
            raise ValueError("empty log: no candidate was ever evaluated")
        best_n, best_mean = 0, -math.inf
        for n in sorted(self._counts):
            m = self.sample_mean(n)
            if m > best_mean:
                best_n, best_mean = n, m
        return best_n

    # -- serialization ----------------------------------------------------

    def to_jsonl(self, fp: IO[str]) -> None:
        for o in self._observations:
            fp.write(
                json.dumps({"round": o.round, "candidate": o.candidate, "score": o.score})
                + "\n"
            )

    @classmethod
    def from_jsonl(
        cls, lines: Iterable[str], n_candidates: int | None = None
    ) -> "ObservationLog":
        log = cls(n_candidates=n_candidates)
        for line in lines:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            log.record_observation(int(doc["candidate"]), float(doc["score"]))
        return log

    def copy(self) -> "ObservationLog":
        out = ObservationLog(n_candidates=self.n_candidates)
        for o in self._observations:
            out.record_observation(o.candidate, o.score)
        return out


def record_observation(log: ObservationLog, n: int, score: float) -> ObservationLog:
    return log.record_observation(n, score)


def sample_mean(log: ObservationLog, n: int) -> float:
    return log.sample_mean(n)


def final_selection(log: ObservationLog) -> int:
    return log.final_selection()
