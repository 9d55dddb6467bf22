"""Config-driven experiment harness and command line interface.

Commands:
    promptsel run <config.toml> [--jobs J] [--seed-offset K] [--output DIR]
    promptsel validate <config.toml>
    promptsel report <directory>

A run writes ``results.csv`` (one row per replication unit, timing columns
prefixed ``time_``) and ``summary.json`` (schema 1, the resolved config
embedded, per-metric mean/std, timing isolated under its own key).  Two runs
with the same config and seed produce identical ``deterministic_digest``
values: the digest covers everything except wall-clock timing.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib  # type: ignore[no-redef]

from .acquisition import AcquisitionConfig, PrConfig, default_beta, default_gamma
from .core import CandidateSet, ObservationLog, SoftPrompt
from .loop import (
    SamplerChoice,
    VARIANCE_FLOOR,
    draw_posterior_samples,
    run_mucb_loop,
    run_prmucb_loop,
    run_warmup,
    choose_warmup_set,
)
from .posterior import HmcConfig
from .psk import PskModel, psk_fit, refine_search
from .scoring import (
    BaselineSet,
    LlmEvaluator,
    LlmEvaluatorConfig,
    ScoreFunctionConfig,
    SyntheticOracle,
    make_landscape,
    score_texts,
)
from .search import (
    HashEmbeddingProvider,
    PartialSetError,
    SearchConfig,
    candidate_set_from_latents,
    extend_latent_set,
)
from .surrogate import (
    IdentityFeatures,
    RandomFourierFeatures,
    SurrogateSpec,
    forward_batch,
)

__all__ = [
    "ConfigError",
    "load_config",
    "validate_config",
    "run_experiment",
    "compute_rmse_cr",
    "deterministic_digest",
    "main",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """The experiment config failed validation."""


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

_DEFAULTS: dict = {
    "mode": "single-run",
    "seed": 0,
    "replications": 1,
    "output": "runs/out",
    "candidates": {
        "source": "synthetic",  # synthetic | file | generate
        "n": 20,
        "dim": 5,
        "file": "",
        "initial_prompts": [],
        "latent_dim": 64,
        "r1": 0.3,
        "r2": 0.9,
        "max_attempts": 10_000,
    },
    "oracle": {
        "kind": "synthetic",  # synthetic | llm
        "landscape": "linear",
        "noise_std": 0.1,
        "endpoint": "",
        "model": "",
        "auth_env": "LLM_API_TOKEN",
        "temperature": 0.0,
        "timeout": 30.0,
        "baseline_file": "",
        "vectorizer": "tf",
    },
    "surrogate": {
        "kind": "blr",  # blr | gp | bnn
        "features": "identity",  # identity | rff (blr/gp)
        "n_features": 256,
        "hidden": 64,
        "activation": "tanh",
        "prior_scale": 1.0,
    },
    "sampler": {
        "method": "exact",  # exact | hmc | vi
        "refresh_every": 1,
        "hmc_step_size": 0.01,
        "hmc_leapfrog_steps": 20,
        "hmc_burn_in": 500,
        "hmc_adapt": True,
        "vi_iterations": 800,
        "vi_learning_rate": 0.05,
        "vi_mc_samples": 8,
    },
    "acquisition": {
        "optimizer": "mucb",  # mucb | prmucb (single-run)
        "beta": "sqrt2logt",  # sqrt2logt | zero | const:<x>
        "gamma": "2rsqrt",  # 2rsqrt | zero | const:<x>
        "k": 100,
        "pr_starts": 8,
        "pr_iterations": 300,
        "pr_samples": 64,
    },
    "budget": {
        "total": 60,
        "warmup_replications": 5,
        "refinement": 20,
    },
    "compare": {
        "models": ["blr"],
        "candidate_counts": [],  # [] -> [candidates.n]
        "train_fraction": 0.7,
        "train_replications": 5,
        "holdout_replications": 50,
        "noise_handling": "estimated",  # estimated | known
        "psk_d_star": 2,
        "psk_hidden": 32,
        "psk_starts": 2,
    },
}

_MODES = ("single-run", "surrogate-compare", "mucb-vs-prmucb", "two-stage-vs-psk")


def _merge(defaults: dict, user: dict, path: str, errors: list[str]) -> dict:
    out = {}
    for key, base in defaults.items():
        if key in user:
            value = user[key]
            if isinstance(base, dict):
                if not isinstance(value, dict):
                    errors.append(f"{path}{key}: expected a table")
                    out[key] = base
                else:
                    out[key] = _merge(base, value, f"{path}{key}.", errors)
            else:
                out[key] = value
        else:
            out[key] = {k: v for k, v in base.items()} if isinstance(base, dict) else base
    for key in user:
        if key not in defaults:
            errors.append(f"{path}{key}: unknown key")
    return out


def load_config(path: str | Path) -> dict:
    """Parse and validate a TOML config; raises ConfigError with all problems."""
    raw = Path(path).read_bytes()
    try:
        user = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML parse error in {path}: {exc}") from exc
    errors: list[str] = []
    cfg = _merge(_DEFAULTS, user, "", errors)
    errors.extend(validate_config(cfg, base_dir=Path(path).parent))
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def validate_config(cfg: dict, base_dir: Path | None = None) -> list[str]:
    """Semantic checks; returns a list of human-readable problems."""
    errors: list[str] = []
    if cfg["mode"] not in _MODES:
        errors.append(f"mode: must be one of {_MODES}")
    if cfg["replications"] < 1:
        errors.append("replications: must be >= 1")
    cand = cfg["candidates"]
    if cand["source"] not in ("synthetic", "file", "generate"):
        errors.append("candidates.source: must be synthetic | file | generate")
    if cand["source"] == "file":
        fpath = Path(cand["file"])
        if base_dir is not None and not fpath.is_absolute():
            fpath = base_dir / fpath
        if not cand["file"] or not fpath.exists():
            errors.append(f"candidates.file: {cand['file']!r} not found")
    if cand["source"] == "generate" and len(cand["initial_prompts"]) < 1:
        errors.append("candidates.initial_prompts: need at least one prompt")
    if cand["n"] < 2:
        errors.append("candidates.n: must be >= 2")
    if cand["dim"] < 1:
        errors.append("candidates.dim: must be >= 1")
    oracle = cfg["oracle"]
    if oracle["kind"] not in ("synthetic", "llm"):
        errors.append("oracle.kind: must be synthetic | llm")
    if oracle["kind"] == "synthetic" and oracle["landscape"] not in (
        "linear",
        "quadratic-bowl",
        "multi-modal",
    ):
        errors.append(f"oracle.landscape: unknown {oracle['landscape']!r}")
    if oracle["kind"] == "llm":
        for field in ("endpoint", "model", "baseline_file"):
            if not oracle[field]:
                errors.append(f"oracle.{field}: required for the llm oracle")
        if cand["source"] == "synthetic":
            errors.append("oracle.kind=llm needs text candidates (source file/generate)")
    sur = cfg["surrogate"]
    if sur["kind"] not in ("blr", "gp", "bnn"):
        errors.append("surrogate.kind: must be blr | gp | bnn")
    if sur["features"] not in ("identity", "rff"):
        errors.append("surrogate.features: must be identity | rff")
    sampler = cfg["sampler"]
    if sampler["method"] not in ("exact", "hmc", "vi"):
        errors.append("sampler.method: must be exact | hmc | vi")
    if sur["kind"] == "bnn" and sampler["method"] == "exact":
        errors.append("sampler.method=exact requires a linear surrogate (blr/gp)")
    acq = cfg["acquisition"]
    if acq["optimizer"] not in ("mucb", "prmucb"):
        errors.append("acquisition.optimizer: must be mucb | prmucb")
    for name in ("beta", "gamma"):
        try:
            _parse_schedule(acq[name], name)
        except ConfigError as exc:
            errors.append(str(exc))
    budget = cfg["budget"]
    if budget["total"] < 1:
        errors.append("budget.total: must be >= 1")
    if budget["warmup_replications"] < 2:
        errors.append("budget.warmup_replications: must be >= 2")
    comp = cfg["compare"]
    if cfg["mode"] == "surrogate-compare":
        for kind in comp["models"]:
            if kind not in ("blr", "gp", "bnn"):
                errors.append(f"compare.models: unknown surrogate {kind!r}")
        if not 0.0 < comp["train_fraction"] < 1.0:
            errors.append("compare.train_fraction: must be in (0, 1)")
        if comp["train_replications"] < 2:
            errors.append("compare.train_replications: must be >= 2")
        if comp["holdout_replications"] < 1:
            errors.append("compare.holdout_replications: must be >= 1")
        if comp["noise_handling"] not in ("estimated", "known"):
            errors.append("compare.noise_handling: must be estimated | known")
    return errors


def _parse_schedule(text: str, which: str) -> Callable:
    if which == "beta":
        if text == "sqrt2logt":
            return default_beta
        if text == "zero":
            return lambda t: 0.0
    else:
        if text == "2rsqrt":
            return default_gamma
        if text == "zero":
            return lambda r: 0.0
    if isinstance(text, str) and text.startswith("const:"):
        try:
            value = float(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"acquisition.{which}: bad constant in {text!r}") from None
        return lambda _: value
    raise ConfigError(f"acquisition.{which}: unknown schedule {text!r}")


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _rep_seed(cfg: dict, seed_offset: int, rep: int) -> int:
    return int(cfg["seed"]) + seed_offset + rep


def _build_candidates(
    cfg: dict, rep_seed: int, rng: np.random.Generator, base_dir: Path
) -> CandidateSet:
    cand = cfg["candidates"]
    if cand["source"] == "file":
        fpath = Path(cand["file"])
        if not fpath.is_absolute():
            fpath = base_dir / fpath
        return CandidateSet.from_dict(json.loads(fpath.read_text()))
    if cand["source"] == "synthetic":
        dim = int(cand["dim"])
        zs = rng.uniform(-1.0, 1.0, size=(int(cand["n"]), dim))
        prompts = [SoftPrompt(id=i + 1, z=zs[i]) for i in range(len(zs))]
        return CandidateSet(prompts=prompts, projection=np.eye(dim))
    provider = HashEmbeddingProvider(int(cand["latent_dim"]), seed=rep_seed % 2**31)
    search_cfg = SearchConfig(
        target_count=int(cand["n"]),
        r1=float(cand["r1"]),
        r2=float(cand["r2"]),
        max_attempts=int(cand["max_attempts"]),
    )
    similarity = lambda a, b: score_texts(a, b)
    latents = extend_latent_set(
        list(cand["initial_prompts"]), search_cfg, provider, similarity, rng
    )
    return candidate_set_from_latents(
        latents, int(cand["dim"]), provider, n_initial=len(cand["initial_prompts"])
    )


def _build_oracle(
    cfg: dict, dim: int, rng: np.random.Generator, base_dir: Path
) -> SyntheticOracle | LlmEvaluator:
    oracle = cfg["oracle"]
    if oracle["kind"] == "synthetic":
        mean_fn = make_landscape(oracle["landscape"], dim, rng)
        return SyntheticOracle(mean_fn, float(oracle["noise_std"]), name=oracle["landscape"])
    fpath = Path(oracle["baseline_file"])
    if not fpath.is_absolute():
        fpath = base_dir / fpath
    baseline = BaselineSet.from_json(fpath.read_text())
    lcfg = LlmEvaluatorConfig(
        endpoint=oracle["endpoint"],
        model=oracle["model"],
        auth_env=oracle["auth_env"],
        timeout=float(oracle["timeout"]),
        temperature=float(oracle["temperature"]),
    )
    score_cfg = ScoreFunctionConfig(oracle["vectorizer"], corpus=baseline.corpus())
    return LlmEvaluator(baseline, lcfg, score_cfg)


def _build_spec(
    cfg: dict, kind: str, dim: int, reference: np.ndarray, rng: np.random.Generator
) -> SurrogateSpec:
    sur = cfg["surrogate"]
    scale = float(sur["prior_scale"])
    if kind == "bnn":
        return SurrogateSpec.bnn(
            dim, hidden=int(sur["hidden"]), activation=sur["activation"], prior_scale=scale
        )
    if kind == "gp" or sur["features"] == "rff":
        fm = RandomFourierFeatures.make(
            dim,
            n_features=int(sur["n_features"]),
            reference_points=reference,
            rng=rng,
        )
    else:
        fm = IdentityFeatures(dim)
    return SurrogateSpec(kind="blr" if kind == "blr" else "gp", feature_map=fm, prior_scale=scale)


def _build_sampler(cfg: dict) -> SamplerChoice:
    s = cfg["sampler"]
    return SamplerChoice(
        method=s["method"],
        refresh_every=int(s["refresh_every"]),
        hmc=HmcConfig(
            step_size=float(s["hmc_step_size"]),
            leapfrog_steps=int(s["hmc_leapfrog_steps"]),
            burn_in=int(s["hmc_burn_in"]),
            adapt=bool(s["hmc_adapt"]),
        ),
        vi_iterations=int(s["vi_iterations"]),
        vi_learning_rate=float(s["vi_learning_rate"]),
        vi_mc_samples=int(s["vi_mc_samples"]),
    )


def _build_acquisition(cfg: dict) -> AcquisitionConfig:
    acq = cfg["acquisition"]
    return AcquisitionConfig(
        beta_schedule=_parse_schedule(acq["beta"], "beta"),
        gamma=_parse_schedule(acq["gamma"], "gamma"),
        n_posterior_samples=int(acq["k"]),
        pr=PrConfig(
            n_starts=int(acq["pr_starts"]),
            n_iterations=int(acq["pr_iterations"]),
            n_samples=int(acq["pr_samples"]),
        ),
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def compute_rmse_cr(
    predictions: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    holdout_means: np.ndarray,
) -> tuple[float, float]:
    """Root-mean-square error and interval coverage rate on the holdout set."""
    predictions = np.asarray(predictions, dtype=float)
    holdout_means = np.asarray(holdout_means, dtype=float)
    rmse = float(np.sqrt(np.mean((predictions - holdout_means) ** 2)))
    inside = (np.asarray(lower) <= holdout_means) & (holdout_means <= np.asarray(upper))
    return rmse, float(np.mean(inside))


# ---------------------------------------------------------------------------
# Mode runners (each returns one or more result rows as dicts)
# ---------------------------------------------------------------------------


def _true_means(candidates: CandidateSet, oracle: SyntheticOracle) -> np.ndarray:
    return np.array([oracle.mean_fn(z) for z in candidates.z_matrix])


def _single_run_rows(cfg: dict, seed_offset: int, rep: int, base_dir: Path) -> list[dict]:
    rep_seed = _rep_seed(cfg, seed_offset, rep)
    setup_rng = np.random.default_rng([rep_seed, 0])
    candidates = _build_candidates(cfg, rep_seed, setup_rng, base_dir)
    dim = candidates.z_matrix.shape[1]
    oracle = _build_oracle(cfg, dim, setup_rng, base_dir)
    spec = _build_spec(cfg, cfg["surrogate"]["kind"], dim, candidates.z_matrix, setup_rng)
    sampler = _build_sampler(cfg)
    acq = _build_acquisition(cfg)
    run_rng = np.random.default_rng([rep_seed, 1])
    runner = run_mucb_loop if cfg["acquisition"]["optimizer"] == "mucb" else run_prmucb_loop
    result = runner(
        candidates,
        spec,
        sampler,
        acq,
        int(cfg["budget"]["total"]),
        oracle,
        run_rng,
        warmup_replications=int(cfg["budget"]["warmup_replications"]),
    )
    row = {
        "replication": rep,
        "seed": rep_seed,
        "method": cfg["acquisition"]["optimizer"],
        "selected": result.selected if result.selected is not None else "",
        "n_observations": result.log.round,
        "selected_mean": (
            result.log.sample_mean(result.selected) if result.selected else ""
        ),
        "selected_true_mean": "",
        "best_true_mean": "",
        "regret": "",
        "error": result.error or "",
    }
    if isinstance(oracle, SyntheticOracle) and result.selected:
        truths = _true_means(candidates, oracle)
        row["selected_true_mean"] = float(truths[result.selected - 1])
        row["best_true_mean"] = float(truths.max())
        row["regret"] = float(truths.max() - truths[result.selected - 1])
    for phase in ("warmup", "posterior", "acquisition", "oracle"):
        row[f"time_{phase}"] = result.timings.get(phase, 0.0)
    return [row]


_SINGLE_RUN_COLUMNS = [
    "replication", "seed", "method", "selected", "n_observations", "selected_mean",
    "selected_true_mean", "best_true_mean", "regret", "error",
    "time_warmup", "time_posterior", "time_acquisition", "time_oracle",
]


def _surrogate_compare_rows(
    cfg: dict, seed_offset: int, rep: int, kind: str, n_cand: int, base_dir: Path
) -> list[dict]:
    comp = cfg["compare"]
    rep_seed = _rep_seed(cfg, seed_offset, rep)
    dim = int(cfg["candidates"]["dim"])
    setup_rng = np.random.default_rng([rep_seed, 0])
    zs = setup_rng.uniform(-1.0, 1.0, size=(n_cand, dim))
    mean_fn = make_landscape(cfg["oracle"]["landscape"], dim, setup_rng)
    noise_std = float(cfg["oracle"]["noise_std"])
    oracle = SyntheticOracle(mean_fn, noise_std)

    run_rng = np.random.default_rng([rep_seed, 1])
    n_train = int(round(comp["train_fraction"] * n_cand))
    perm = run_rng.permutation(n_cand)
    train_idx, hold_idx = perm[:n_train], perm[n_train:]
    if len(hold_idx) == 0:
        raise ConfigError("compare.train_fraction leaves an empty holdout set")

    prompts = [SoftPrompt(id=i + 1, z=zs[i]) for i in range(n_cand)]
    candidates = CandidateSet(prompts=prompts, projection=np.eye(dim))
    log = ObservationLog(n_candidates=n_cand)
    r_train = int(comp["train_replications"])
    for i in train_idx:
        for _ in range(r_train):
            log.record_observation(int(i) + 1, oracle.evaluate(zs[i], run_rng))
    noise = np.full(n_cand, noise_std**2)
    if comp["noise_handling"] == "estimated":
        for i in train_idx:
            noise[i] = max(log.sample_variance(int(i) + 1), VARIANCE_FLOOR)
    candidates.noise_variance = noise

    spec = _build_spec(cfg, kind, dim, zs, run_rng)
    sampler = _build_sampler(cfg)
    if kind == "bnn" and sampler.method == "exact":
        raise ConfigError("compare.models includes bnn: set sampler.method to hmc or vi")
    k = int(cfg["acquisition"]["k"])

    started = time.perf_counter()
    samples = draw_posterior_samples(
        spec, log, candidates, noise, sampler, k, run_rng, t=log.round
    )
    time_fit = time.perf_counter() - started

    started = time.perf_counter()
    z_hold = zs[hold_idx]
    values = forward_batch(spec, samples.samples, z_hold)  # (k, holdout)
    pred = values.mean(axis=0)
    lower = np.quantile(values, 0.05, axis=0)
    upper = np.quantile(values, 0.95, axis=0)
    time_predict = time.perf_counter() - started

    r_hold = int(comp["holdout_replications"])
    vbar = np.array(
        [np.mean([oracle.evaluate(zs[i], run_rng) for _ in range(r_hold)]) for i in hold_idx]
    )
    rmse, coverage = compute_rmse_cr(pred, lower, upper, vbar)
    return [{
        "model": kind,
        "n_candidates": n_cand,
        "replication": rep,
        "seed": rep_seed,
        "rmse": rmse,
        "coverage": coverage,
        "time_fit": time_fit,
        "time_predict": time_predict,
    }]


_SURROGATE_COMPARE_COLUMNS = [
    "model", "n_candidates", "replication", "seed", "rmse", "coverage",
    "time_fit", "time_predict",
]


def _mucb_vs_prmucb_rows(cfg: dict, seed_offset: int, rep: int, base_dir: Path) -> list[dict]:
    rep_seed = _rep_seed(cfg, seed_offset, rep)
    rows = []
    for method, runner in (("mucb", run_mucb_loop), ("prmucb", run_prmucb_loop)):
        setup_rng = np.random.default_rng([rep_seed, 0])
        candidates = _build_candidates(cfg, rep_seed, setup_rng, base_dir)
        dim = candidates.z_matrix.shape[1]
        oracle = _build_oracle(cfg, dim, setup_rng, base_dir)
        if not isinstance(oracle, SyntheticOracle):
            raise ConfigError("mucb-vs-prmucb needs the synthetic oracle")
        spec = _build_spec(cfg, cfg["surrogate"]["kind"], dim, candidates.z_matrix, setup_rng)
        run_rng = np.random.default_rng([rep_seed, 1])
        result = runner(
            candidates,
            spec,
            _build_sampler(cfg),
            _build_acquisition(cfg),
            int(cfg["budget"]["total"]),
            oracle,
            run_rng,
            warmup_replications=int(cfg["budget"]["warmup_replications"]),
        )
        truths = _true_means(candidates, oracle)
        selected = result.selected or 0
        warmup_rounds = result.warmup.t_w if result.warmup else 0
        seq_rounds = max(result.log.round - warmup_rounds, 1)
        impl = result.timings.get("posterior", 0.0) + result.timings.get("acquisition", 0.0)
        rows.append({
            "method": method,
            "replication": rep,
            "seed": rep_seed,
            "selected": selected,
            "selected_true_mean": float(truths[selected - 1]) if selected else "",
            "best_true_mean": float(truths.max()),
            "regret": float(truths.max() - truths[selected - 1]) if selected else "",
            "correct": int(selected == int(np.argmax(truths)) + 1),
            "rounds": seq_rounds,
            "error": result.error or "",
            "time_warmup": result.timings.get("warmup", 0.0),
            "time_posterior": result.timings.get("posterior", 0.0),
            "time_acquisition": result.timings.get("acquisition", 0.0),
            "time_oracle": result.timings.get("oracle", 0.0),
            "time_impl_per_round": impl / seq_rounds,
        })
    return rows


_MUCB_VS_PRMUCB_COLUMNS = [
    "method", "replication", "seed", "selected", "selected_true_mean", "best_true_mean",
    "regret", "correct", "rounds", "error",
    "time_warmup", "time_posterior", "time_acquisition", "time_oracle", "time_impl_per_round",
]


def _two_stage_vs_psk_rows(cfg: dict, seed_offset: int, rep: int, base_dir: Path) -> list[dict]:
    rep_seed = _rep_seed(cfg, seed_offset, rep)
    comp = cfg["compare"]
    total = int(cfg["budget"]["total"])
    rows = []

    def fresh_problem() -> tuple[CandidateSet, SyntheticOracle]:
        setup_rng = np.random.default_rng([rep_seed, 0])
        candidates = _build_candidates(cfg, rep_seed, setup_rng, base_dir)
        dim = candidates.z_matrix.shape[1]
        oracle = _build_oracle(cfg, dim, setup_rng, base_dir)
        if not isinstance(oracle, SyntheticOracle):
            raise ConfigError("two-stage-vs-psk needs the synthetic oracle")
        return candidates, oracle

    # Fixed candidate pool (two-stage), PSK refinement over the box, random search.
    candidates, oracle = fresh_problem()
    dim = candidates.z_matrix.shape[1]
    run_rng = np.random.default_rng([rep_seed, 1])
    started = time.perf_counter()
    spec = _build_spec(cfg, cfg["surrogate"]["kind"], dim, candidates.z_matrix, run_rng)
    result = run_mucb_loop(
        candidates, spec, _build_sampler(cfg), _build_acquisition(cfg),
        total, oracle, run_rng,
        warmup_replications=int(cfg["budget"]["warmup_replications"]),
    )
    elapsed = time.perf_counter() - started
    selected_z = candidates.z_matrix[(result.selected or 1) - 1]
    rows.append({
        "method": "two-stage",
        "replication": rep,
        "seed": rep_seed,
        "best_true_mean": float(oracle.mean_fn(selected_z)),
        "best_score_estimate": (
            result.log.sample_mean(result.selected) if result.selected else ""
        ),
        "n_evaluations": result.log.round,
        "uncertainty_total": "",
        "error": result.error or "",
        "time_total": elapsed,
    })

    candidates, oracle = fresh_problem()
    run_rng = np.random.default_rng([rep_seed, 1])
    started = time.perf_counter()
    warm_idx = choose_warmup_set(candidates, run_rng)
    warm_r = int(cfg["budget"]["warmup_replications"])
    log = ObservationLog(n_candidates=len(candidates))
    report = run_warmup(candidates, warm_idx, warm_r, oracle, log, run_rng)
    x_train = np.stack([candidates.z_matrix[n - 1] for n in warm_idx])
    vbar = np.array([log.sample_mean(n) for n in warm_idx])
    noise_train = np.array([report.sample_variances[n] for n in warm_idx])
    reps = np.full(len(warm_idx), float(warm_r))
    projection = psk_fit(
        x_train,
        vbar,
        noise_train / reps,
        d_star=int(comp["psk_d_star"]),
        hidden=int(comp["psk_hidden"]),
        n_starts=int(comp["psk_starts"]),
        rng=run_rng,
    )
    model = PskModel(
        projection, x_train, vbar, reps, noise_train,
        noise_fn=lambda x: report.variance_model(x),
    )
    refine_budget = total - report.t_w
    if refine_budget < 1:
        raise ConfigError("budget.total too small for PSK warm-up plus refinement")
    refined = refine_search(
        model, refine_budget, lambda x, r: oracle.evaluate(x, r), run_rng
    )
    elapsed = time.perf_counter() - started
    rows.append({
        "method": "psk",
        "replication": rep,
        "seed": rep_seed,
        "best_true_mean": float(oracle.mean_fn(refined.best_x)),
        "best_score_estimate": refined.best_score,
        "n_evaluations": report.t_w + refine_budget,
        "uncertainty_total": refined.uncertainty_total,
        "error": "",
        "time_total": elapsed,
    })

    candidates, oracle = fresh_problem()
    run_rng = np.random.default_rng([rep_seed, 1])
    started = time.perf_counter()
    xs = run_rng.uniform(-1.0, 1.0, size=(total, dim))
    scores = np.array([oracle.evaluate(x, run_rng) for x in xs])
    best = int(np.argmax(scores))
    elapsed = time.perf_counter() - started
    rows.append({
        "method": "random",
        "replication": rep,
        "seed": rep_seed,
        "best_true_mean": float(oracle.mean_fn(xs[best])),
        "best_score_estimate": float(scores[best]),
        "n_evaluations": total,
        "uncertainty_total": "",
        "error": "",
        "time_total": elapsed,
    })
    return rows


_TWO_STAGE_VS_PSK_COLUMNS = [
    "method", "replication", "seed", "best_true_mean", "best_score_estimate",
    "n_evaluations", "uncertainty_total", "error", "time_total",
]


# ---------------------------------------------------------------------------
# Run orchestration and outputs
# ---------------------------------------------------------------------------


def _work_items(cfg: dict, seed_offset: int, base_dir: Path) -> tuple[list, list[str]]:
    mode = cfg["mode"]
    reps = int(cfg["replications"])
    if mode == "single-run":
        items = [((rep,), lambda rep=rep: _single_run_rows(cfg, seed_offset, rep, base_dir))
                 for rep in range(reps)]
        return items, _SINGLE_RUN_COLUMNS
    if mode == "surrogate-compare":
        counts = [int(n) for n in cfg["compare"]["candidate_counts"]] or [
            int(cfg["candidates"]["n"])
        ]
        items = []
        for kind in cfg["compare"]["models"]:
            for n_cand in counts:
                for rep in range(reps):
                    items.append((
                        (kind, n_cand, rep),
                        lambda kind=kind, n=n_cand, rep=rep: _surrogate_compare_rows(
                            cfg, seed_offset, rep, kind, n, base_dir
                        ),
                    ))
        return items, _SURROGATE_COMPARE_COLUMNS
    if mode == "mucb-vs-prmucb":
        items = [((rep,), lambda rep=rep: _mucb_vs_prmucb_rows(cfg, seed_offset, rep, base_dir))
                 for rep in range(reps)]
        return items, _MUCB_VS_PRMUCB_COLUMNS
    items = [((rep,), lambda rep=rep: _two_stage_vs_psk_rows(cfg, seed_offset, rep, base_dir))
             for rep in range(reps)]
    return items, _TWO_STAGE_VS_PSK_COLUMNS


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def run_experiment(
    cfg: dict,
    output_dir: str | Path,
    jobs: int = 1,
    seed_offset: int = 0,
    base_dir: str | Path | None = None,
) -> tuple[Path, Path]:
    """Execute the configured mode; write results.csv and summary.json.

    Returns the two output paths.  Rows are produced in a deterministic order
    regardless of the worker count.
    """
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    started = time.perf_counter()
    items, columns = _work_items(cfg, seed_offset, base)
    rows: list[tuple[tuple, list[dict]]] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [(key, pool.submit(fn)) for key, fn in items]
            rows = [(key, fut.result()) for key, fut in futures]
    else:
        rows = [(key, fn()) for key, fn in items]
    rows.sort(key=lambda kr: kr[0])
    flat = [row for _, group in rows for row in group]
    wall = time.perf_counter() - started

    outdir = Path(output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_path = outdir / "results.csv"
    with csv_path.open("w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(columns)
        for row in flat:
            writer.writerow([_format_cell(row.get(col, "")) for col in columns])

    metrics: dict[str, dict[str, float]] = {}
    for col in columns:
        if col.startswith("time_"):
            continue
        values = []
        for row in flat:
            v = row.get(col, "")
            if isinstance(v, (bool, np.bool_)):
                values.append(float(int(v)))
            elif isinstance(v, (int, float, np.integer, np.floating)):
                values.append(float(v))
        if values:
            arr = np.array(values)
            metrics[col] = {"mean": float(arr.mean()), "std": float(arr.std())}
    timing = {"total_s": wall}
    for col in columns:
        if col.startswith("time_"):
            vals = [float(row.get(col, 0.0) or 0.0) for row in flat]
            timing[col + "_mean"] = float(np.mean(vals)) if vals else 0.0
    summary = {
        "schema": SCHEMA_VERSION,
        "mode": cfg["mode"],
        "seed": int(cfg["seed"]),
        "seed_offset": seed_offset,
        "replications": int(cfg["replications"]),
        "n_rows": len(flat),
        "config": cfg,
        "metrics": metrics,
        "timing": timing,
    }
    summary_path = outdir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, summary_path


def deterministic_digest(output_dir: str | Path) -> str:
    """Hash of a run's outputs with every wall-clock quantity stripped."""
    outdir = Path(output_dir)
    with (outdir / "results.csv").open(newline="") as fp:
        table = list(csv.reader(fp))
    header = table[0]
    keep = [i for i, name in enumerate(header) if not name.startswith("time_")]
    buf = io.StringIO()
    writer = csv.writer(buf)
    for row in table:
        writer.writerow([row[i] for i in keep])
    summary = json.loads((outdir / "summary.json").read_text())
    summary.pop("timing", None)
    if isinstance(summary.get("config"), dict):
        summary["config"].pop("output", None)  # where a run landed, not what it computed
    canon = json.dumps(summary, sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha256()
    digest.update(buf.getvalue().encode("utf-8"))
    digest.update(b"\x00")
    digest.update(canon.encode("utf-8"))
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.output:
        cfg["output"] = args.output
    try:
        csv_path, summary_path = run_experiment(
            cfg,
            cfg["output"],
            jobs=args.jobs,
            seed_offset=args.seed_offset,
            base_dir=Path(args.config).parent,
        )
    except (ConfigError, PartialSetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {csv_path} and {summary_path}")
    print(f"digest {deterministic_digest(csv_path.parent)}")
    summary = json.loads(summary_path.read_text())
    errors = [
        row for row in csv.DictReader(csv_path.open())
        if row.get("error")
    ]
    if errors:
        print(f"warning: {len(errors)} row(s) ended early on oracle failure", file=sys.stderr)
        return 1
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    try:
        load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 2
    print("config OK")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    root = Path(args.directory)
    summaries = sorted(root.rglob("summary.json"))
    if not summaries:
        print(f"no summary.json under {root}", file=sys.stderr)
        return 1
    for path in summaries:
        doc = json.loads(path.read_text())
        parts = [f"{path.parent}", f"mode={doc.get('mode')}", f"rows={doc.get('n_rows')}"]
        for name, stats in sorted(doc.get("metrics", {}).items()):
            if name in ("replication", "seed", "selected", "n_candidates"):
                continue
            parts.append(f"{name}={stats['mean']:.4f}±{stats['std']:.4f}")
        print("  ".join(parts))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="promptsel", description="Sequential prompt-selection experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to a TOML experiment config")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel replications")
    p_run.add_argument("--seed-offset", type=int, default=0, help="shift every seed")
    p_run.add_argument("--output", default="", help="override the output directory")
    p_run.set_defaults(fn=_cmd_run)

    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    p_val.set_defaults(fn=_cmd_validate)

    p_rep = sub.add_parser("report", help="summarize finished runs under a directory")
    p_rep.add_argument("directory")
    p_rep.set_defaults(fn=_cmd_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
