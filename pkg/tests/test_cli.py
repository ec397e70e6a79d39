"""End-to-end pipeline through the command line: composability, manifests,
exit codes, and byte-level determinism of metric artifacts."""

import json

import pytest
from click.testing import CliRunner

from semrec.cli import canon_variants, main, parse_int_list, parse_sets
from semrec.util import file_hash, read_json

SYNTH_ARGS = ["synth", "--items", "40", "--users", "30", "--clusters", "4",
              "--seed", "0", "--set", "min_len=5", "--set", "max_len=12",
              "--set", "text_dim=12", "--set", "image_dim=10"]
S1_SETS = ["--set", "levels=2", "--set", "codes=8", "--set", "dim=8",
           "--set", "batch_size=32", "--set", "kmeans_iters=5",
           "--set", "dropout=0.0", "--set", "max_len=12",
           "--set", "seq_heads=2", "--set", "epochs=2"]
GEN_SETS = ["--set", "d_model=24", "--set", "enc_layers=1",
            "--set", "dec_layers=1", "--set", "heads=2",
            "--set", "ffn_mult=2", "--set", "dropout=0.0",
            "--set", "max_hist=8", "--set", "batch_size=16",
            "--set", "epochs=2", "--set", "beam_size=8", "--set", "top_k=5"]


def run(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One shared synth -> train-quant -> assign-ids -> train-gen chain."""
    root = tmp_path_factory.mktemp("pipeline")
    runner = CliRunner()
    run(runner, SYNTH_ARGS + ["--out", str(root / "data")])
    run(runner, ["train-quant", "--data", str(root / "data")] + S1_SETS
        + ["--out", str(root / "s1")])
    run(runner, ["assign-ids", "--checkpoint", str(root / "s1"),
                 "--sim-buckets", "10", "--out", str(root / "ids")])
    run(runner, ["train-gen", "--ids", str(root / "ids")] + GEN_SETS
        + ["--out", str(root / "gen")])
    return root, runner


class TestHelpers:
    def test_parse_sets_json_and_string(self):
        out = parse_sets(["epochs=3", "lr=0.5", "sim_mode=ones",
                          "no_mim=true"])
        assert out == {"epochs": 3, "lr": 0.5, "sim_mode": "ones",
                       "no_mim": True}

    def test_parse_sets_rejects_bare_keys(self):
        import click
        with pytest.raises(click.ClickException):
            parse_sets(["epochs"])

    def test_parse_int_list(self):
        assert parse_int_list("5,10") == (5, 10)

    def test_variant_aliases(self):
        assert canon_variants("full,S,E,no-mim,U") == \
            ("full", "static_sim", "inherit_emb", "no_mim", "no_shared")


class TestPipeline:
    def test_artifacts_and_manifests(self, pipeline):
        root, _ = pipeline
        for d, files in {
            "data": ["items.bin", "sequences.bin", "stats.json",
                     "synth_info.json"],
            "s1": ["stage1.ckpt", "stage1_meta.json", "train_report.json"],
            "ids": ["id_table.bin", "sim_table.bin", "semantic_ids.tsv",
                    "collisions.json"],
            "gen": ["generator.ckpt", "generator_meta.json",
                    "gen_train_report.json"],
        }.items():
            for f in files + ["manifest.json"]:
                assert (root / d / f).exists(), f"{d}/{f} missing"
            manifest = read_json(root / d / "manifest.json")
            assert manifest["code_version"]
            assert set(manifest["artifacts"]) == set(files)

    def test_manifest_records_input_hashes(self, pipeline):
        root, _ = pipeline
        m = read_json(root / "s1" / "manifest.json")
        assert m["inputs"]["data"].endswith("data")
        assert len(m["dataset_hash"]) == 64
        m2 = read_json(root / "ids" / "manifest.json")
        assert set(m2["input_hashes"]) == {"checkpoint", "data"}

    def test_evaluate_writes_metrics(self, pipeline):
        root, runner = pipeline
        result = run(runner, ["evaluate", "--checkpoint", str(root / "gen"),
                              "--k", "2,5", "--beam", "16",
                              "--out", str(root / "eval")])
        payload = read_json(root / "eval" / "metrics.json")
        assert set(payload["metrics"]) == {"R@2", "R@5", "N@2", "N@5"}
        assert payload["split"] == "test"
        assert "R@5:" in result.output
        rows = [json.loads(line) for line in
                (root / "eval" / "recommendations.jsonl").read_text().splitlines()]
        assert len(rows) == payload["n_users"]
        for row in rows:
            assert set(row) == {"user_id", "item_ids", "log_probs"}
            assert row["log_probs"] == sorted(row["log_probs"], reverse=True)
            assert len(row["item_ids"]) == len(row["log_probs"])

    def test_metric_json_is_deterministic(self, pipeline):
        root, runner = pipeline
        for d in ("eval_a", "eval_b"):
            run(runner, ["evaluate", "--checkpoint", str(root / "gen"),
                         "--k", "2,5", "--beam", "16",
                         "--out", str(root / d)])
        assert file_hash(root / "eval_a" / "metrics.json") == \
            file_hash(root / "eval_b" / "metrics.json")

    def test_retraining_reproduces_state_hash(self, pipeline):
        root, runner = pipeline
        run(runner, ["train-gen", "--ids", str(root / "ids")] + GEN_SETS
            + ["--out", str(root / "gen_repeat")])
        a = read_json(root / "gen" / "generator_meta.json")["state_hash"]
        b = read_json(root / "gen_repeat" / "generator_meta.json")["state_hash"]
        assert a == b

    def test_collisions_subcommand(self, pipeline):
        root, runner = pipeline
        result = run(runner, ["collisions", "--ids", str(root / "ids"),
                              "--out", str(root / "audit.json")])
        assert "full-ID collision rate" in result.output
        audit = read_json(root / "audit.json")
        assert audit == read_json(root / "ids" / "collisions.json")

    def test_bench_subcommand(self, pipeline):
        root, runner = pipeline
        result = run(runner, ["bench", "--checkpoint", str(root / "gen"),
                              "--beam-sizes", "2,4", "--n-users", "4",
                              "--repeats", "1", "--out", str(root / "bench")])
        payload = read_json(root / "bench" / "bench.json")
        assert set(payload["latency"]) == {"2", "4"}
        assert payload["hardware"]["torch_threads"] >= 1
        assert "ms/user" in result.output

    def test_ablate_and_plot(self, pipeline, tmp_path):
        root, runner = pipeline
        result = run(runner, [
            "ablate", "--data", str(root / "data"), "--variants", "full,S",
            "--seeds", "0"]
            + ["--set-s1" if a == "--set" else a for a in S1_SETS]
            + ["--set-gen" if a == "--set" else a for a in GEN_SETS]
            + ["--set-eval", "ks=[2,5]", "--set-eval", "top_k=5",
               "--set-eval", "beam_size=16", "--set-eval", "eval_batch=16",
               "--out", str(tmp_path / "abl")])
        assert "| static_sim |" in result.output
        report = read_json(tmp_path / "abl" / "ablation_report.json")
        assert set(report["variants"]) == {"full", "static_sim"}
        plot_result = run(runner, [
            "plot", "--report", str(tmp_path / "abl" / "ablation_report.json"),
            "--out", str(tmp_path / "plots")])
        assert "ablation plots" in plot_result.output
        assert (tmp_path / "plots" / "ablation_R5.png").exists()


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        result = CliRunner().invoke(main, ["synth", "--bogus", "1"])
        assert result.exit_code == 2

    def test_unknown_subcommand_is_usage_error(self):
        result = CliRunner().invoke(main, ["frobnicate"])
        assert result.exit_code == 2

    def test_missing_input_is_precondition_failure(self, tmp_path):
        result = CliRunner().invoke(
            main, ["train-quant", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "out")])
        assert result.exit_code == 1
        assert "Error" in result.output

    def test_unknown_config_key_is_precondition_failure(self, tmp_path):
        runner = CliRunner()
        run(runner, SYNTH_ARGS + ["--out", str(tmp_path / "data")])
        result = runner.invoke(
            main, ["train-quant", "--data", str(tmp_path / "data"),
                   "--set", "bogus_knob=3", "--out", str(tmp_path / "out")])
        assert result.exit_code == 1
        assert "unknown config keys" in result.output

    def test_unknown_variant_is_precondition_failure(self, tmp_path):
        runner = CliRunner()
        run(runner, SYNTH_ARGS + ["--out", str(tmp_path / "data")])
        result = runner.invoke(
            main, ["ablate", "--data", str(tmp_path / "data"),
                   "--variants", "full,bogus", "--seeds", "0",
                   "--out", str(tmp_path / "abl")])
        assert result.exit_code == 1
        assert "unknown variant" in result.output


class TestDataRoot:
    def test_relative_paths_resolve_against_env_root(self, tmp_path,
                                                     monkeypatch):
        monkeypatch.setenv("SEMREC_DATA_ROOT", str(tmp_path))
        runner = CliRunner()
        run(runner, SYNTH_ARGS + ["--out", "data"])
        assert (tmp_path / "data" / "items.bin").exists()


class TestConfigPrecedence:
    def test_flag_beats_file_beats_default(self, tmp_path):
        runner = CliRunner()
        cfg_file = tmp_path / "synth.json"
        cfg_file.write_text(json.dumps({"n_items": 25, "n_clusters": 4,
                                        "n_users": 20, "min_len": 5,
                                        "max_len": 10, "text_dim": 8,
                                        "image_dim": 8}))
        run(runner, ["synth", "--config", str(cfg_file), "--items", "30",
                     "--seed", "0", "--out", str(tmp_path / "d")])
        stats = read_json(tmp_path / "d" / "stats.json")
        assert stats["n_items"] == 30   # flag wins over file's 25
        assert stats["n_users"] == 20   # file wins over default 5000
