"""Tests for config validation, CLI exit codes, and stage plumbing."""

import json

import pytest

from trace_seq import cli
from trace_seq.config import load_config
from trace_seq.errors import ConfigError

MICRO = """
seed = 7

[cohort]
n_patients = 220
n_codes = 30
n_observations = 8
mean_visits = 5.0
max_total_visits = 10

[pretrain]
n_patients = 60
n_codes = 40
code_offset = 6
epochs = 2

[autoencoder]
epochs = 2

[train]
variant = "TRACE"
epochs = 2

[hyper]
downsized_dim = 6
embed_dim = 12
batch_size = 50
max_visits = 10
"""


@pytest.fixture()
def micro_config(tmp_path):
    path = tmp_path / "micro.toml"
    path.write_text(MICRO)
    return path


class TestLoadConfig:
    def test_empty_file_yields_published_defaults(self, tmp_path):
        path = tmp_path / "empty.toml"
        path.write_text("")
        cfg = load_config(path)
        assert cfg.hyper.downsized_dim == 100
        assert cfg.hyper.embed_dim == 128
        assert cfg.hyper.batch_size == 100
        assert cfg.hyper.dropout == 0.5
        assert cfg.hyper.lr == 1.0
        assert cfg.hyper.rho == 0.95
        assert cfg.hyper.eps == 1e-6
        assert cfg.hyper.max_visits == 30
        assert cfg.hyper.controls_per_case == 6
        assert tuple(cfg.hyper.split) == (0.75, 0.10, 0.15)
        assert cfg.train.epochs == 50
        assert cfg.autoencoder.epochs == 50

    def test_no_file_is_all_defaults(self):
        cfg = load_config(None)
        assert cfg.train.variant == "TRACE"

    def test_unknown_key_rejected_with_path(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[hyper]\nbatchsize = 5\n")
        with pytest.raises(ConfigError, match="hyper.batchsize"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[optimizer]\nlr = 1.0\n")
        with pytest.raises(ConfigError, match="optimizer"):
            load_config(path)

    def test_out_of_range_dropout_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[hyper]\ndropout = 1.5\n")
        with pytest.raises(ConfigError, match="hyper.dropout"):
            load_config(path)

    def test_bad_split_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[hyper]\nsplit = [0.5, 0.3, 0.1]\n")
        with pytest.raises(ConfigError, match="hyper.split"):
            load_config(path)

    def test_bad_variant_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[train]\nvariant = \"CNN\"\n")
        with pytest.raises(ConfigError, match="train.variant"):
            load_config(path)

    def test_overrides_win(self, micro_config):
        cfg = load_config(micro_config, seed=99, out_dir="/tmp/elsewhere")
        assert cfg.seed == 99
        assert cfg.out_dir == "/tmp/elsewhere"

    def test_config_hash_is_stable(self, micro_config):
        assert load_config(micro_config).content_hash() == load_config(micro_config).content_hash()


class TestExitCodes:
    def test_bad_config_value_exits_3(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[hyper]\ndropout = 1.5\n")
        assert cli.main(["--config", str(bad), "gen-cohort"]) == 3

    def test_missing_config_file_exits_3(self, tmp_path):
        assert cli.main(["--config", str(tmp_path / "nope.toml"), "gen-cohort"]) == 3

    def test_malformed_toml_exits_3(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("seed = [unclosed\n")
        assert cli.main(["--config", str(bad), "gen-cohort"]) == 3

    def test_evaluate_before_train_exits_2_naming_train(self, micro_config, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["--config", str(micro_config), "--out", str(out), "--quiet", "gen-cohort"]) == 0
        code = cli.main(["--config", str(micro_config), "--out", str(out), "--quiet", "evaluate"])
        assert code == 2
        assert "train" in capsys.readouterr().err

    def test_stage_before_cohort_exits_2_naming_gen_cohort(self, micro_config, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.main(["--config", str(micro_config), "--out", str(out), "--quiet", "pretrain-codes"])
        assert code == 2
        assert "gen-cohort" in capsys.readouterr().err

    def test_no_stage_prints_help(self, capsys):
        assert cli.main([]) == 3
        assert "gen-cohort" in capsys.readouterr().out


class TestPipelineChain:
    @pytest.mark.slow
    def test_micro_chain_and_determinism(self, micro_config, tmp_path):
        """Full micro pipeline runs, and re-running stages is byte-identical."""
        out = tmp_path / "out"
        base = ["--config", str(micro_config), "--out", str(out), "--quiet"]
        for stage in ("gen-cohort", "pretrain-codes", "pretrain-autoencoder", "train", "evaluate"):
            assert cli.main(base + [stage]) == 0, stage

        first = {
            stage: json.loads((out / f"manifest_{stage}.json").read_text())["outputs"]
            for stage in ("gen-cohort", "pretrain-codes", "pretrain-autoencoder", "train", "evaluate")
        }
        metrics_before = (out / "metrics_TRACE.json").read_bytes()
        for stage in ("gen-cohort", "pretrain-codes", "pretrain-autoencoder", "train", "evaluate"):
            assert cli.main(base + [stage]) == 0
            second = json.loads((out / f"manifest_{stage}.json").read_text())["outputs"]
            assert second == first[stage], f"stage {stage} not reproducible"
        assert (out / "metrics_TRACE.json").read_bytes() == metrics_before

        # export stages: embeddings cover the test split at the hidden width
        assert cli.main(base + ["export-embeddings"]) == 0
        assert cli.main(base + ["export-attention"]) == 0
        from trace_seq.ehr import load_cohort

        _, _, _, split = load_cohort(out / "cohort.jsonl")
        n_test = sum(1 for s in split.values() if s == "test")
        lines = (out / "embeddings_TRACE.csv").read_text().strip().splitlines()
        assert len(lines) == 1 + n_test
        assert lines[0].split(",")[2:] == [f"e{i+1}" for i in range(12)]
        emb_bytes = (out / "embeddings_TRACE.csv").read_bytes()
        assert cli.main(base + ["export-embeddings"]) == 0
        assert (out / "embeddings_TRACE.csv").read_bytes() == emb_bytes

    def test_seed_override_changes_outputs(self, micro_config, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(["--config", str(micro_config), "--out", str(out1), "--quiet", "gen-cohort"]) == 0
        assert cli.main(["--config", str(micro_config), "--out", str(out2), "--seed", "8", "--quiet", "gen-cohort"]) == 0
        h1 = json.loads((out1 / "manifest_gen-cohort.json").read_text())["outputs"]["cohort.jsonl"]
        h2 = json.loads((out2 / "manifest_gen-cohort.json").read_text())["outputs"]["cohort.jsonl"]
        assert h1 != h2
