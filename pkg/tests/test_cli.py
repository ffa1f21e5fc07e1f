import json
import subprocess
import sys

import numpy as np
import pytest

from gexrestore.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    ConfigError,
    main,
    resolve_config,
    stream_seed,
)
from gexrestore.downstream.pipelines import read_csv
from gexrestore.pretrain import load_checkpoint

SMALL = {
    "seed": 3,
    "synth": {"n_samples": 60, "n_genes": 16, "n_factors": 2, "n_classes": 2},
    "model": {"d": 8, "n_layers": 1, "n_heads": 2, "n_levels": 8},
    "pretrain": {"n_gene_in": 6, "n_gene_out": 4, "epochs": 3, "batch_size": 8,
                 "monitor_every": 1},
    "downstream": {
        "repeats": 1,
        "classify": {"sizes": [8], "nn_epochs": 5, "finetune_epochs": 1},
        "survival": {"anchors": 4, "anchor_counts": [2, 4], "input_size": 6, "l2_grid": [0.1],
                     "folds": 3, "inner_folds": 2, "anchor_folds": 3},
        "impute": {"rates": [0.01, 0.1, 0.3, 0.5], "sizes": [6], "k": 3, "mice_size": 6},
        "attention": {"genes_per_pass": 6, "n_passes": 1},
    },
}


def _config(tmp_path, **over):
    cfg = json.loads(json.dumps(SMALL))
    cfg.update(over)
    p = tmp_path / "run.json"
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A synthesized dataset plus a pretrained checkpoint in one output directory."""
    tmp = tmp_path_factory.mktemp("run")
    cfg = _config(tmp)
    out = str(tmp / "out")
    assert main(["synth", "--config", cfg, "--out", out]) == EXIT_OK
    assert main(["pretrain", "--config", cfg, "--out", out]) == EXIT_OK
    return cfg, tmp / "out"


class TestConfig:
    def test_defaults_and_streams(self):
        cfg = resolve_config({}, env={})
        assert cfg["seed"] == 0
        assert set(cfg["seed_streams"]) >= {"split", "init", "pretrain", "impute"}
        assert cfg["seed_streams"]["split"] == stream_seed(0, "split")
        assert stream_seed(0, "split") != stream_seed(0, "init")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="pretrain.bogus"):
            resolve_config({"pretrain": {"bogus": 1}}, env={})

    def test_dotted_override(self):
        cfg = resolve_config({}, ["pretrain.lr=0.01", "downstream.impute.rates=[0.2]"], env={})
        assert cfg["pretrain"]["lr"] == 0.01
        assert cfg["downstream"]["impute"]["rates"] == [0.2]

    def test_unknown_override(self):
        with pytest.raises(ConfigError, match="model.width"):
            resolve_config({}, ["model.width=3"], env={})

    def test_env_seed(self):
        assert resolve_config({"seed": 1}, env={"GEX_SEED": "7"})["seed"] == 7
        with pytest.raises(ConfigError):
            resolve_config({}, env={"GEX_SEED": "x"})

    def test_invalid_values(self):
        with pytest.raises(ConfigError):
            resolve_config({"model": {"d": 10, "n_heads": 3}}, env={})
        with pytest.raises(ConfigError):
            resolve_config({"downstream": {"impute": {"methods": ["BPCA"]}}}, env={})
        with pytest.raises(ConfigError):
            resolve_config({"pretrain": {"epochs": 0}}, env={})


class TestExitCodes:
    def test_unknown_key_exit_2(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"synth": {"n_sample": 5}}))
        assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "synth.n_sample" in capsys.readouterr().err

    def test_missing_data_exit_2(self, tmp_path, capsys):
        out = tmp_path / "empty"
        assert main(["pretrain", "--config", _config(tmp_path), "--out", str(out)]) == EXIT_CONFIG
        assert str(out / "expression.csv") in capsys.readouterr().err

    def test_bad_usage_exit_2(self):
        assert main(["nope"]) == EXIT_CONFIG
        assert main(["synth", "--jobs", "x"]) == EXIT_CONFIG

    def test_missing_checkpoint_exit_2(self, tmp_path):
        cfg = _config(tmp_path)
        out = str(tmp_path / "o")
        assert main(["synth", "--config", cfg, "--out", out]) == EXIT_OK
        assert main(["embed", "--config", cfg, "--out", out]) == EXIT_CONFIG
        assert main(["classify", "--config", cfg, "--out", out]) == EXIT_CONFIG

    def test_corrupt_checkpoint_exit_3(self, trained, tmp_path):
        cfg, out = trained
        bad = tmp_path / "bad.bin"
        buf = bytearray((out / "checkpoint.bin").read_bytes())
        buf[100] ^= 1
        bad.write_bytes(bytes(buf))
        assert main(["embed", "--config", cfg, "--out", str(tmp_path / "e"),
                     "--checkpoint", str(bad), "--set", f"data.dir=\"{out}\""]) == EXIT_DATA


class TestSynth:
    def test_files_and_determinism(self, tmp_path):
        cfg = _config(tmp_path)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--config", cfg, "--out", str(a)]) == EXIT_OK
        assert main(["synth", "--config", cfg, "--out", str(b)]) == EXIT_OK
        for name in ("expression.csv", "survival_records.csv", "labels.csv", "truth.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name


class TestPretrain:
    def test_checkpoint_and_log(self, trained):
        _, out = trained
        ck = load_checkpoint(out / "checkpoint.bin")
        assert ck.finished and len(ck.log) == 3
        lines = (out / "pretrain_log.csv").read_text().splitlines()
        assert len(lines) == 4

    def test_epochs_flag(self, trained, tmp_path):
        cfg, out = trained
        o = tmp_path / "one"
        assert main(["pretrain", "--config", cfg, "--out", str(o), "--epochs", "1",
                     "--set", f"data.dir=\"{out}\""]) == EXIT_OK
        assert len(load_checkpoint(o / "checkpoint.bin").log) == 1

    def test_resume_equals_uninterrupted(self, trained, tmp_path):
        cfg, out = trained
        o = tmp_path / "part"
        data = ["--set", f"data.dir=\"{out}\""]
        assert main(["pretrain", "--config", cfg, "--out", str(o), "--stop-after", "1", *data]) == 0
        assert len(load_checkpoint(o / "checkpoint.bin").log) == 1
        assert main(["pretrain", "--config", cfg, "--out", str(o),
                     "--resume", str(o / "checkpoint.bin"), *data]) == EXIT_OK
        assert ((o / "pretrain_log.csv").read_bytes()
                == (out / "pretrain_log.csv").read_bytes())
        assert ((o / "checkpoint.bin").read_bytes() == (out / "checkpoint.bin").read_bytes())


class TestDownstream:
    def test_embed(self, trained):
        cfg, out = trained
        assert main(["embed", "--config", cfg, "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "embeddings.csv")
        assert len(rows) == 18  # 30% of 60 samples
        assert len(rows[0]) == 1 + 8

    def test_classify(self, trained):
        cfg, out = trained
        assert main(["classify", "--config", cfg, "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "classify.csv")
        assert {r["arm"] for r in rows} == {"PCA200+linear", "CLS+linear", "NN", "FINETUNE"}
        assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)

    def test_survival(self, trained):
        cfg, out = trained
        assert main(["survival", "--config", cfg, "--out", str(out)]) == EXIT_OK
        arms = {r["arm"] for r in read_csv(out / "survival.csv")}
        assert arms == {"Original", "Restored", "Both", "Restored@2", "Restored@4"}
        anchors = read_csv(out / "anchors.csv")
        assert len(anchors) == 4
        assert list(anchors[0]) == ["label", "gene_id", "rank", "cv_cindex"]

    def test_impute_full_grid(self, trained):
        cfg, out = trained
        assert main(["impute", "--config", cfg, "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "impute.csv")
        cells = {(r["rate"], r["method"]) for r in rows}
        assert cells == {(str(rate), m) for rate in (0.01, 0.1, 0.3, 0.5)
                         for m in ("ZERO", "MEAN", "KNN", "MICE", "MODEL")}
        assert len(read_csv(out / "impute_mse.csv")) == len(rows)

    def test_attention(self, trained):
        cfg, out = trained
        assert main(["attention", "--config", cfg, "--out", str(out)]) == EXIT_OK
        rows = read_csv(out / "attention.csv")
        assert {r["label"] for r in rows} == {"ALL", "c0", "c1"}
        scores = [float(r["score"]) for r in rows if r["score"]]
        assert scores and all(0.0 <= s <= 1.0 for s in scores)

    def test_outputs_deterministic(self, trained, tmp_path):
        cfg, out = trained
        o = tmp_path / "again"
        args = ["--config", cfg, "--out", str(o), "--checkpoint", str(out / "checkpoint.bin"),
                "--set", f"data.dir=\"{out}\""]
        assert main(["survival", *args]) == EXIT_OK
        assert main(["survival", *args, "--jobs", "2"]) == EXIT_OK
        first = (o / "survival.csv").read_bytes()
        assert main(["survival", *args]) == EXIT_OK
        assert (o / "survival.csv").read_bytes() == first
        assert main(["survival", "--config", cfg, "--out", str(out)]) == EXIT_OK
        assert (out / "survival.csv").read_bytes() == first


def test_console_script(tmp_path):
    res = subprocess.run([sys.executable, "-m", "gexrestore.cli", "synth", "--out", str(tmp_path),
                          "--set", "synth.n_samples=10", "--set", "synth.n_genes=5"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "expression.csv").exists()
