"""Config loading, experiment modes, output determinism, and the CLI entry point."""

import csv
import json
import textwrap

import numpy as np
import pytest

from promptsel.cli import (
    ConfigError,
    compute_rmse_cr,
    deterministic_digest,
    load_config,
    main,
    run_experiment,
)
from promptsel.core import CandidateSet, SoftPrompt


def _write_config(tmp_path, body, name="exp.toml"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body))
    return path


# A small, fast single-run setup used by several tests.
_FAST_SINGLE = """
    mode = "single-run"
    seed = 7
    replications = 2

    [candidates]
    source = "synthetic"
    n = 6
    dim = 2

    [oracle]
    landscape = "linear"
    noise_std = 0.05

    [budget]
    total = 18
    warmup_replications = 2
"""


def _read_rows(csv_path):
    with open(csv_path, newline="") as fp:
        return list(csv.DictReader(fp))


class TestConfigLoading:
    def test_minimal_config_fills_defaults(self, tmp_path):
        """A config stating only the mode inherits every documented default."""
        cfg = load_config(_write_config(tmp_path, 'mode = "single-run"\n'))
        assert cfg["seed"] == 0
        assert cfg["replications"] == 1
        assert cfg["candidates"]["n"] == 20
        assert cfg["candidates"]["dim"] == 5
        assert cfg["oracle"]["kind"] == "synthetic"
        assert cfg["surrogate"]["kind"] == "blr"
        assert cfg["sampler"]["method"] == "exact"
        assert cfg["acquisition"]["optimizer"] == "mucb"
        assert cfg["budget"]["total"] == 60
        assert cfg["compare"]["models"] == ["blr"]

    def test_user_values_override_defaults(self, tmp_path):
        cfg = load_config(
            _write_config(
                tmp_path,
                """
                mode = "single-run"
                seed = 42

                [candidates]
                n = 9

                [sampler]
                method = "hmc"
                hmc_burn_in = 50
                """,
            )
        )
        assert cfg["seed"] == 42
        assert cfg["candidates"]["n"] == 9
        assert cfg["candidates"]["dim"] == 5  # untouched sibling keeps its default
        assert cfg["sampler"]["method"] == "hmc"
        assert cfg["sampler"]["hmc_burn_in"] == 50

    def test_unknown_key_is_rejected_with_its_path(self, tmp_path):
        path = _write_config(
            tmp_path,
            """
            mode = "single-run"

            [candidates]
            banana = 3
            """,
        )
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert "candidates.banana: unknown key" in str(err.value)

    def test_unknown_top_level_key(self, tmp_path):
        path = _write_config(tmp_path, 'mode = "single-run"\nturbo = true\n')
        with pytest.raises(ConfigError, match="turbo: unknown key"):
            load_config(path)

    def test_toml_syntax_error_is_a_config_error(self, tmp_path):
        path = _write_config(tmp_path, 'mode = "single-run\n')  # unterminated string
        with pytest.raises(ConfigError, match="TOML parse error"):
            load_config(path)

    def test_all_problems_reported_in_one_message(self, tmp_path):
        """Validation collects every issue instead of stopping at the first."""
        path = _write_config(
            tmp_path,
            """
            mode = "interpretive-dance"
            replications = 0

            [candidates]
            n = 1
            """,
        )
        with pytest.raises(ConfigError) as err:
            load_config(path)
        message = str(err.value)
        assert "mode:" in message
        assert "replications:" in message
        assert "candidates.n:" in message


class TestValidationRules:
    @pytest.mark.parametrize(
        "body, fragment",
        [
            ('mode = "waffle"', "mode: must be one of"),
            ('mode = "single-run"\nreplications = 0', "replications: must be >= 1"),
            ('mode = "single-run"\n[candidates]\nsource = "magic"', "candidates.source"),
            ('mode = "single-run"\n[candidates]\nn = 1', "candidates.n: must be >= 2"),
            ('mode = "single-run"\n[candidates]\ndim = 0', "candidates.dim"),
            ('mode = "single-run"\n[oracle]\nkind = "quantum"', "oracle.kind"),
            (
                'mode = "single-run"\n[oracle]\nlandscape = "volcano"',
                "oracle.landscape: unknown 'volcano'",
            ),
            ('mode = "single-run"\n[surrogate]\nkind = "vae"', "surrogate.kind"),
            ('mode = "single-run"\n[surrogate]\nfeatures = "poly"', "surrogate.features"),
            ('mode = "single-run"\n[sampler]\nmethod = "gibbs"', "sampler.method"),
            ('mode = "single-run"\n[acquisition]\noptimizer = "ts"', "acquisition.optimizer"),
            ('mode = "single-run"\n[acquisition]\nbeta = "const:x"', "bad constant"),
            ('mode = "single-run"\n[acquisition]\ngamma = "frob"', "unknown schedule"),
            ('mode = "single-run"\n[budget]\ntotal = 0', "budget.total"),
            (
                'mode = "single-run"\n[budget]\nwarmup_replications = 1',
                "warmup_replications: must be >= 2",
            ),
        ],
        ids=[
            "mode",
            "replications",
            "source",
            "n",
            "dim",
            "oracle-kind",
            "landscape",
            "surrogate-kind",
            "features",
            "sampler",
            "optimizer",
            "beta-const",
            "gamma-unknown",
            "budget-total",
            "warmup-reps",
        ],
    )
    def test_rejects(self, tmp_path, body, fragment):
        with pytest.raises(ConfigError) as err:
            load_config(_write_config(tmp_path, body))
        assert fragment in str(err.value)

    def test_generate_source_needs_prompts(self, tmp_path):
        path = _write_config(
            tmp_path,
            'mode = "single-run"\n[candidates]\nsource = "generate"\n',
        )
        with pytest.raises(ConfigError, match="initial_prompts"):
            load_config(path)

    def test_file_source_requires_existing_file(self, tmp_path):
        path = _write_config(
            tmp_path,
            """
            mode = "single-run"
            [candidates]
            source = "file"
            file = "missing.json"
            """,
        )
        with pytest.raises(ConfigError, match="not found"):
            load_config(path)

    def test_file_source_resolves_relative_to_config(self, tmp_path):
        """candidates.file is looked up next to the config, not the cwd."""
        (tmp_path / "cands.json").write_text("{}")
        cfg = load_config(
            _write_config(
                tmp_path,
                """
                mode = "single-run"
                [candidates]
                source = "file"
                file = "cands.json"
                """,
            )
        )
        assert cfg["candidates"]["file"] == "cands.json"

    def test_llm_oracle_requires_endpoint_model_and_baselines(self, tmp_path):
        path = _write_config(
            tmp_path,
            """
            mode = "single-run"
            [candidates]
            source = "generate"
            initial_prompts = ["a"]
            [oracle]
            kind = "llm"
            """,
        )
        with pytest.raises(ConfigError) as err:
            load_config(path)
        message = str(err.value)
        for field in ("oracle.endpoint", "oracle.model", "oracle.baseline_file"):
            assert field in message

    def test_llm_oracle_rejects_synthetic_candidates(self, tmp_path):
        path = _write_config(
            tmp_path,
            """
            mode = "single-run"
            [oracle]
            kind = "llm"
            endpoint = "https://example.test/v1"
            model = "m"
            baseline_file = "b.json"
            """,
        )
        with pytest.raises(ConfigError, match="text candidates"):
            load_config(path)

    def test_bnn_surrogate_needs_a_sampling_method(self, tmp_path):
        bad = _write_config(
            tmp_path,
            'mode = "single-run"\n[surrogate]\nkind = "bnn"\n',
            name="bad.toml",
        )
        with pytest.raises(ConfigError, match="requires a linear surrogate"):
            load_config(bad)
        ok = _write_config(
            tmp_path,
            'mode = "single-run"\n[surrogate]\nkind = "bnn"\n[sampler]\nmethod = "hmc"\n',
            name="ok.toml",
        )
        assert load_config(ok)["surrogate"]["kind"] == "bnn"

    def test_compare_rules_apply_only_to_compare_mode(self, tmp_path):
        """An out-of-range train_fraction only matters when the mode uses it."""
        body = """
            mode = "%s"
            [compare]
            train_fraction = 1.5
        """
        ok = _write_config(tmp_path, body % "single-run", name="ok.toml")
        assert load_config(ok)["compare"]["train_fraction"] == 1.5
        bad = _write_config(tmp_path, body % "surrogate-compare", name="bad.toml")
        with pytest.raises(ConfigError, match="train_fraction"):
            load_config(bad)

    def test_compare_mode_checks_its_own_fields(self, tmp_path):
        path = _write_config(
            tmp_path,
            """
            mode = "surrogate-compare"
            [compare]
            models = ["vae"]
            train_replications = 1
            holdout_replications = 0
            noise_handling = "wishful"
            """,
        )
        with pytest.raises(ConfigError) as err:
            load_config(path)
        message = str(err.value)
        assert "unknown surrogate 'vae'" in message
        assert "train_replications" in message
        assert "holdout_replications" in message
        assert "noise_handling" in message

    def test_constant_schedules_parse(self, tmp_path):
        cfg = load_config(
            _write_config(
                tmp_path,
                """
                mode = "single-run"
                [acquisition]
                beta = "const:2.5"
                gamma = "const:0.25"
                """,
            )
        )
        assert cfg["acquisition"]["beta"] == "const:2.5"


class TestRmseCoverage:
    def test_frozen_values(self):
        """Errors (0.1, -0.2, 0.2) with two of three intervals covering."""
        preds = np.array([1.1, 0.8, 1.2])
        holdout = np.array([1.0, 1.0, 1.0])
        lower = np.array([0.9, 0.9, 1.3])
        upper = np.array([1.2, 1.2, 1.5])
        rmse, cr = compute_rmse_cr(preds, lower, upper, holdout)
        np.testing.assert_allclose(rmse, np.sqrt(0.03), rtol=1e-12)
        np.testing.assert_allclose(rmse, 0.17320508075688773, rtol=1e-12)
        np.testing.assert_allclose(cr, 2.0 / 3.0, rtol=1e-12)

    def test_perfect_predictions(self):
        preds = np.array([0.5, -0.5])
        rmse, cr = compute_rmse_cr(preds, preds - 0.1, preds + 0.1, preds)
        assert rmse == 0.0
        assert cr == 1.0

    def test_interval_endpoints_count_as_covered(self):
        rmse, cr = compute_rmse_cr(
            np.array([0.0]), np.array([1.0]), np.array([2.0]), np.array([1.0])
        )
        assert cr == 1.0
        np.testing.assert_allclose(rmse, 1.0)


class TestSingleRunMode:
    def test_rows_columns_and_budget(self, tmp_path):
        cfg = load_config(_write_config(tmp_path, _FAST_SINGLE))
        csv_path, summary_path = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        rows = _read_rows(csv_path)
        assert len(rows) == 2  # one row per replication
        assert list(rows[0].keys()) == [
            "replication",
            "seed",
            "method",
            "selected",
            "n_observations",
            "selected_mean",
            "selected_true_mean",
            "best_true_mean",
            "regret",
            "error",
            "time_warmup",
            "time_posterior",
            "time_acquisition",
            "time_oracle",
        ]
        for row in rows:
            assert row["method"] == "mucb"
            assert int(row["n_observations"]) == 18
            assert 1 <= int(row["selected"]) <= 6
            assert row["error"] == ""
            assert float(row["regret"]) >= 0.0

    def test_low_noise_run_selects_the_true_best(self, tmp_path):
        """With mild noise and a modest budget the loop lands on the argmax."""
        cfg = load_config(_write_config(tmp_path, _FAST_SINGLE))
        csv_path, _ = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        for row in _read_rows(csv_path):
            assert float(row["regret"]) == 0.0
            np.testing.assert_allclose(
                float(row["selected_true_mean"]), float(row["best_true_mean"])
            )

    def test_summary_document(self, tmp_path):
        cfg = load_config(_write_config(tmp_path, _FAST_SINGLE))
        _, summary_path = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        doc = json.loads(summary_path.read_text())
        assert doc["schema"] == 1
        assert doc["mode"] == "single-run"
        assert doc["seed"] == 7
        assert doc["replications"] == 2
        assert doc["n_rows"] == 2
        assert doc["config"] == cfg  # full config embedded for reproducibility
        assert set(doc["metrics"]["regret"]) == {"mean", "std"}
        assert "time_oracle_mean" in doc["timing"]
        assert doc["timing"]["total_s"] > 0.0
        # Wall-clock columns stay out of the metric table.
        assert not any(k.startswith("time_") for k in doc["metrics"])

    def test_prmucb_optimizer_row(self, tmp_path):
        body = _FAST_SINGLE + textwrap.dedent(
            """
            [acquisition]
            optimizer = "prmucb"
            pr_starts = 2
            pr_iterations = 40
            pr_samples = 16
            """
        )
        cfg = load_config(_write_config(tmp_path, body))
        cfg["replications"] = 1
        csv_path, _ = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        rows = _read_rows(csv_path)
        assert len(rows) == 1
        assert rows[0]["method"] == "prmucb"
        assert rows[0]["error"] == ""


class TestDeterminism:
    def test_identical_runs_share_a_digest(self, tmp_path):
        cfg = load_config(_write_config(tmp_path, _FAST_SINGLE))
        run_experiment(cfg, tmp_path / "a", base_dir=tmp_path)
        run_experiment(cfg, tmp_path / "b", base_dir=tmp_path)
        assert deterministic_digest(tmp_path / "a") == deterministic_digest(tmp_path / "b")

    def test_seed_offset_changes_the_digest(self, tmp_path):
        cfg = load_config(_write_config(tmp_path, _FAST_SINGLE))
        run_experiment(cfg, tmp_path / "a", base_dir=tmp_path)
        run_experiment(cfg, tmp_path / "b", seed_offset=1, base_dir=tmp_path)
        assert deterministic_digest(tmp_path / "a") != deterministic_digest(tmp_path / "b")

    def test_output_location_does_not_enter_the_digest(self, tmp_path):
        cfg = load_config(_write_config(tmp_path, _FAST_SINGLE))
        cfg_b = dict(cfg, output="somewhere/else")
        run_experiment(cfg, tmp_path / "a", base_dir=tmp_path)
        run_experiment(cfg_b, tmp_path / "b", base_dir=tmp_path)
        assert deterministic_digest(tmp_path / "a") == deterministic_digest(tmp_path / "b")

    def test_parallel_workers_match_serial_output(self, tmp_path):
        """Row order and content are a function of the config, not the worker count."""
        body = _FAST_SINGLE.replace("replications = 2", "replications = 3", 1)
        cfg = load_config(_write_config(tmp_path, body))
        run_experiment(cfg, tmp_path / "serial", jobs=1, base_dir=tmp_path)
        run_experiment(cfg, tmp_path / "parallel", jobs=3, base_dir=tmp_path)
        assert deterministic_digest(tmp_path / "serial") == deterministic_digest(
            tmp_path / "parallel"
        )


class TestCompareModes:
    def test_surrogate_compare_rows(self, tmp_path):
        cfg = load_config(
            _write_config(
                tmp_path,
                """
                mode = "surrogate-compare"
                seed = 11
                replications = 2

                [candidates]
                n = 6
                dim = 2

                [oracle]
                noise_std = 0.2

                [compare]
                models = ["blr", "gp"]
                candidate_counts = [6, 8]
                train_replications = 2
                holdout_replications = 5
                """,
            )
        )
        csv_path, summary_path = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        rows = _read_rows(csv_path)
        assert len(rows) == 2 * 2 * 2  # models x counts x replications
        combos = {(r["model"], r["n_candidates"]) for r in rows}
        assert combos == {("blr", "6"), ("blr", "8"), ("gp", "6"), ("gp", "8")}
        for row in rows:
            assert np.isfinite(float(row["rmse"]))
            assert 0.0 <= float(row["coverage"]) <= 1.0
        doc = json.loads(summary_path.read_text())
        assert doc["n_rows"] == 8

    def test_mucb_vs_prmucb_shares_the_landscape(self, tmp_path):
        cfg = load_config(
            _write_config(
                tmp_path,
                """
                mode = "mucb-vs-prmucb"
                seed = 5
                replications = 2

                [candidates]
                n = 5
                dim = 2

                [oracle]
                noise_std = 0.1

                [acquisition]
                pr_starts = 2
                pr_iterations = 40
                pr_samples = 16

                [budget]
                total = 14
                warmup_replications = 2
                """,
            )
        )
        csv_path, _ = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        rows = _read_rows(csv_path)
        assert len(rows) == 4  # two methods per replication
        by_rep = {}
        for row in rows:
            by_rep.setdefault(row["replication"], []).append(row)
        for rep_rows in by_rep.values():
            methods = sorted(r["method"] for r in rep_rows)
            assert methods == ["mucb", "prmucb"]
            # Both methods face the same candidates, so the target matches.
            truths = {r["best_true_mean"] for r in rep_rows}
            assert len(truths) == 1
            for r in rep_rows:
                assert r["correct"] in ("0", "1")
                # 14 total draws minus 2 warm-up candidates x 2 replications.
                assert int(r["rounds"]) == 10

    def test_two_stage_vs_psk_rows(self, tmp_path):
        cfg = load_config(
            _write_config(
                tmp_path,
                """
                mode = "two-stage-vs-psk"
                seed = 2
                replications = 1

                [candidates]
                n = 5
                dim = 2

                [oracle]
                noise_std = 0.1

                [compare]
                psk_hidden = 8
                psk_starts = 1

                [budget]
                total = 14
                warmup_replications = 2
                """,
            )
        )
        csv_path, _ = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        rows = _read_rows(csv_path)
        assert [r["method"] for r in rows] == ["two-stage", "psk", "random"]
        for row in rows:
            assert row["error"] == ""
            assert int(row["n_evaluations"]) == 14
            assert np.isfinite(float(row["best_score_estimate"]))
        psk_row = rows[1]
        assert float(psk_row["uncertainty_total"]) >= 0.0


class TestCandidateSources:
    def test_file_source_round_trip(self, tmp_path):
        """A candidate set serialized to JSON drives a run unchanged."""
        rng = np.random.default_rng(0)
        zs = rng.uniform(-1.0, 1.0, size=(5, 2))
        prompts = [
            SoftPrompt(id=i + 1, z=z, prompt_text=f"p{i}") for i, z in enumerate(zs)
        ]
        cs = CandidateSet(prompts=prompts, projection=np.eye(2))
        (tmp_path / "cands.json").write_text(json.dumps(cs.to_dict()))
        cfg = load_config(
            _write_config(
                tmp_path,
                """
                mode = "single-run"
                seed = 1

                [candidates]
                source = "file"
                file = "cands.json"

                [oracle]
                noise_std = 0.05

                [budget]
                total = 14
                warmup_replications = 2
                """,
            )
        )
        csv_path, _ = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        rows = _read_rows(csv_path)
        assert len(rows) == 1
        assert 1 <= int(rows[0]["selected"]) <= 5
        assert rows[0]["error"] == ""

    def test_generate_source_builds_candidates_from_prompts(self, tmp_path):
        cfg = load_config(
            _write_config(
                tmp_path,
                """
                mode = "single-run"
                seed = 3

                [candidates]
                source = "generate"
                initial_prompts = ["sort the list", "reverse the string", "sum the numbers"]
                n = 6
                dim = 2
                latent_dim = 16
                r1 = 0.0
                r2 = 0.9999

                [oracle]
                noise_std = 0.05

                [budget]
                total = 16
                warmup_replications = 2
                """,
            )
        )
        csv_path, _ = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        rows = _read_rows(csv_path)
        assert len(rows) == 1
        assert rows[0]["error"] == ""
        assert 1 <= int(rows[0]["selected"]) <= 6


class TestNetworkGuard:
    @pytest.mark.parametrize(
        "body",
        [
            _FAST_SINGLE.replace("replications = 2", "replications = 1", 1),
            """
            mode = "surrogate-compare"
            [candidates]
            n = 5
            dim = 2
            [compare]
            train_replications = 2
            holdout_replications = 3
            """,
            """
            mode = "mucb-vs-prmucb"
            [candidates]
            n = 4
            dim = 2
            [acquisition]
            pr_starts = 1
            pr_iterations = 20
            pr_samples = 8
            [budget]
            total = 12
            warmup_replications = 2
            """,
            """
            mode = "two-stage-vs-psk"
            [candidates]
            n = 4
            dim = 2
            [compare]
            psk_hidden = 8
            psk_starts = 1
            [budget]
            total = 12
            warmup_replications = 2
            """,
        ],
        ids=["single-run", "surrogate-compare", "mucb-vs-prmucb", "two-stage-vs-psk"],
    )
    def test_synthetic_modes_never_touch_the_network(self, tmp_path, monkeypatch, body):
        import promptsel.scoring as scoring

        def _fail(*args, **kwargs):
            raise AssertionError("synthetic mode attempted a network call")

        monkeypatch.setattr(scoring, "_default_transport", _fail)
        cfg = load_config(_write_config(tmp_path, body))
        csv_path, _ = run_experiment(cfg, tmp_path / "out", base_dir=tmp_path)
        assert all(row.get("error", "") == "" for row in _read_rows(csv_path))


class TestCommandLine:
    def test_run_command_writes_outputs_and_prints_digest(self, tmp_path, capsys):
        cfg_path = _write_config(tmp_path, _FAST_SINGLE)
        out = tmp_path / "results"
        code = main(["run", str(cfg_path), "--output", str(out)])
        assert code == 0
        captured = capsys.readouterr()
        assert "wrote " in captured.out
        assert "digest " in captured.out
        assert (out / "results.csv").exists()
        assert (out / "summary.json").exists()

    def test_run_missing_config_exits_2(self, tmp_path, capsys):
        code = main(["run", str(tmp_path / "nope.toml")])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_run_invalid_config_exits_2(self, tmp_path, capsys):
        cfg_path = _write_config(tmp_path, 'mode = "nonsense"\n')
        code = main(["run", str(cfg_path)])
        assert code == 2
        assert "mode" in capsys.readouterr().err

    def test_run_partial_candidate_generation_exits_1(self, tmp_path, capsys):
        """An impossible similarity band aborts generation with a clean error."""
        cfg_path = _write_config(
            tmp_path,
            """
            mode = "single-run"

            [candidates]
            source = "generate"
            initial_prompts = ["seed prompt one", "seed prompt two"]
            n = 30
            dim = 2
            latent_dim = 8
            r1 = 0.97
            r2 = 0.98
            max_attempts = 40
            """,
        )
        code = main(["run", str(cfg_path), "--output", str(tmp_path / "out")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_seed_offset_flag_changes_the_digest(self, tmp_path, capsys):
        cfg_path = _write_config(tmp_path, _FAST_SINGLE)
        digests = []
        for offset, sub in (("0", "a"), ("3", "b")):
            code = main(
                [
                    "run",
                    str(cfg_path),
                    "--output",
                    str(tmp_path / sub),
                    "--seed-offset",
                    offset,
                ]
            )
            assert code == 0
            out = capsys.readouterr().out
            digest_line = [l for l in out.splitlines() if l.startswith("digest ")][0]
            digests.append(digest_line.split()[1])
        assert digests[0] != digests[1]

    def test_validate_accepts_a_good_config(self, tmp_path, capsys):
        cfg_path = _write_config(tmp_path, _FAST_SINGLE)
        assert main(["validate", str(cfg_path)]) == 0
        assert "config OK" in capsys.readouterr().out

    def test_validate_rejects_a_bad_config(self, tmp_path, capsys):
        cfg_path = _write_config(tmp_path, 'mode = "single-run"\n[budget]\ntotal = 0\n')
        assert main(["validate", str(cfg_path)]) == 2
        assert "invalid:" in capsys.readouterr().err

    def test_report_lists_finished_runs(self, tmp_path, capsys):
        cfg = load_config(_write_config(tmp_path, _FAST_SINGLE))
        run_experiment(cfg, tmp_path / "runs" / "x", base_dir=tmp_path)
        run_experiment(cfg, tmp_path / "runs" / "y", seed_offset=1, base_dir=tmp_path)
        assert main(["report", str(tmp_path / "runs")]) == 0
        out = capsys.readouterr().out
        lines = [l for l in out.splitlines() if l.strip()]
        assert len(lines) == 2
        for line in lines:
            assert "mode=single-run" in line
            assert "rows=2" in line
            assert "regret=" in line
            assert "±" in line

    def test_report_without_runs_exits_1(self, tmp_path, capsys):
        assert main(["report", str(tmp_path)]) == 1
        assert "no summary.json" in capsys.readouterr().err
