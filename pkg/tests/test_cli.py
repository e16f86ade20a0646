"""End-to-end CLI contracts at tiny scale."""

import json
import os

import numpy as np
import pytest

from blockdiff.cli import main
from blockdiff.corpus import make_sentiment_corpus, make_textlike_corpus, \
    write_labeled_corpus


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    path.write_text(make_textlike_corpus(30_000, seed=4), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def labeled_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "labeled.tsv"
    write_labeled_corpus(path, make_sentiment_corpus(120, seed=4))
    return str(path)


TINY = ["--layers", "2", "--hidden-dim", "32", "--heads", "2",
        "--context-length", "64", "--batch-size", "2", "--warmup-steps", "2",
        "--block-sizes", "1,4"]


@pytest.fixture(scope="module")
def denoiser_dir(tmp_path_factory, corpus_file):
    out = str(tmp_path_factory.mktemp("runs") / "denoiser")
    code = main(["train-denoiser", "--corpus", corpus_file, "--out", out,
                 "--steps", "30", "--seed", "7"] + TINY)
    assert code == 0
    return os.path.join(out, "checkpoint")


@pytest.fixture(scope="module")
def classifier_dir(tmp_path_factory, labeled_file):
    out = str(tmp_path_factory.mktemp("runs") / "classifier")
    code = main(["train-classifier", "--corpus", labeled_file, "--out", out,
                 "--steps", "30", "--seed", "7", "--context-length", "64",
                 "--batch-size", "8", "--warmup-steps", "2"])
    assert code == 0
    return os.path.join(out, "checkpoint")


class TestTrainDenoiser:
    def test_outputs_exist(self, denoiser_dir):
        run_dir = os.path.dirname(denoiser_dir)
        assert os.path.exists(os.path.join(denoiser_dir, "manifest.json"))
        assert os.path.exists(os.path.join(run_dir, "metrics.jsonl"))
        with open(os.path.join(run_dir, "run_config.json")) as fh:
            config = json.load(fh)
        assert config["command"] == "train-denoiser"
        assert config["steps"] == 30 and config["seed"] == 7

    def test_metrics_one_line_per_step(self, denoiser_dir):
        run_dir = os.path.dirname(denoiser_dir)
        with open(os.path.join(run_dir, "metrics.jsonl")) as fh:
            lines = [json.loads(l) for l in fh if l.strip()]
        assert len(lines) == 30
        assert lines[0]["step"] == 0 and np.isfinite(lines[0]["loss"])

    def test_steps_zero_exits_clean(self, tmp_path, corpus_file):
        out = str(tmp_path / "zero")
        assert main(["train-denoiser", "--corpus", corpus_file, "--out", out,
                     "--steps", "0", "--seed", "1"] + TINY) == 0
        assert os.path.exists(os.path.join(out, "checkpoint", "manifest.json"))

    def test_missing_corpus_exits_one(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.txt")
        code = main(["train-denoiser", "--corpus", missing,
                     "--out", str(tmp_path / "o"), "--steps", "1"] + TINY)
        assert code == 1
        assert missing in capsys.readouterr().err


class TestGenerate:
    def test_sidecar_block_lengths(self, tmp_path, denoiser_dir, capsys):
        outdir = str(tmp_path / "gen")
        code = main(["generate", "--denoiser", denoiser_dir, "--length", "8",
                     "--block", "fixed:4", "--seed", "3", "--outdir", outdir])
        assert code == 0
        with open(os.path.join(outdir, "sample.json")) as fh:
            sidecar = json.load(fh)
        assert sidecar["block_lengths"] == [4, 4]
        assert sidecar["seed"] == 3
        text = capsys.readouterr().out.strip()
        assert len(text) == 8

    def test_deterministic_given_seed(self, tmp_path, denoiser_dir):
        outs = []
        for name in ("a", "b"):
            outdir = str(tmp_path / name)
            assert main(["generate", "--denoiser", denoiser_dir, "--length",
                         "12", "--block", "fixed:4", "--seed", "11",
                         "--outdir", outdir]) == 0
            with open(os.path.join(outdir, "sample.txt"), "rb") as fh:
                outs.append(fh.read())
        assert outs[0] == outs[1]

    def test_gamma_zero_equals_unguided(self, tmp_path, denoiser_dir,
                                        classifier_dir):
        texts = []
        for name, guidance in (("u", "none"), ("g", "1:0.0:factorized")):
            outdir = str(tmp_path / name)
            args = ["generate", "--denoiser", denoiser_dir, "--length", "12",
                    "--block", "fixed:4", "--seed", "5", "--guidance", guidance,
                    "--outdir", outdir]
            if guidance != "none":
                args += ["--classifier", classifier_dir]
            assert main(args) == 0
            with open(os.path.join(outdir, "sample.txt")) as fh:
                texts.append(fh.read())
        assert texts[0] == texts[1]

    def test_prompt_prefix_verbatim(self, tmp_path, denoiser_dir, capsys):
        assert main(["generate", "--denoiser", denoiser_dir, "--length", "8",
                     "--block", "fixed:4", "--prompt", "once upon",
                     "--seed", "2"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("once upon")

    def test_policy_block_source(self, tmp_path, denoiser_dir):
        from blockdiff.policy import BlockLengthPolicy
        policy = BlockLengthPolicy(action_lengths=(2, 4), window=2,
                                   feature_dim=32, seed=0).init_untrained()
        pdir = str(tmp_path / "policy")
        policy.save(pdir)
        outdir = str(tmp_path / "gen")
        assert main(["generate", "--denoiser", denoiser_dir, "--length", "8",
                     "--block", f"policy:{pdir}", "--seed", "9",
                     "--outdir", outdir]) == 0
        with open(os.path.join(outdir, "sample.json")) as fh:
            lengths = json.load(fh)["block_lengths"]
        assert sum(lengths) == 8 and set(lengths) <= {2, 4}

    def test_guidance_requires_classifier(self, denoiser_dir, capsys):
        assert main(["generate", "--denoiser", denoiser_dir, "--length", "4",
                     "--guidance", "1:1.0:factorized", "--block", "fixed:4",
                     "--seed", "0"]) == 1
        assert "classifier" in capsys.readouterr().err


class TestEval:
    def test_report_written(self, tmp_path, denoiser_dir, corpus_file):
        outdir = str(tmp_path / "eval")
        samples = tmp_path / "samples.txt"
        samples.write_text("abc def ghi jkl\nmno pqr stu vwx\n")
        code = main(["eval", "--denoiser", denoiser_dir, "--corpus", corpus_file,
                     "--samples", str(samples), "--eval-chars", "256",
                     "--mc-samples", "2", "--block-size", "8", "--seed", "1",
                     "--outdir", outdir])
        assert code == 0
        with open(os.path.join(outdir, "report.json")) as fh:
            report = json.load(fh)
        assert report["bpc"] > 0 and report["ppl"] >= 1
        assert report["gen_ppl"] > 0
        assert 0 < report["dist1"] <= 1 and 0 < report["dist3"] <= 1
        assert report["tokens_per_second"] is None  # timing off by default

    def test_control_accuracy_with_classifier(self, tmp_path, denoiser_dir,
                                              classifier_dir):
        samples = tmp_path / "samples.txt"
        samples.write_text("abc def\nnpq rst\n")
        outdir = str(tmp_path / "eval")
        assert main(["eval", "--denoiser", denoiser_dir, "--samples",
                     str(samples), "--classifier", classifier_dir,
                     "--target-label", "1", "--seed", "0",
                     "--outdir", outdir]) == 0
        with open(os.path.join(outdir, "report.json")) as fh:
            report = json.load(fh)
        assert 0.0 <= report["control_accuracy"] <= 1.0


class TestConfigMerging:
    def test_config_file_overrides_defaults_flags_override_config(
            self, tmp_path, corpus_file):
        config = tmp_path / "run.cfg"
        config.write_text("steps=4\nseed=2  # comment\nbatch_size=2\n"
                          "layers=2\nhidden_dim=32\nheads=2\n"
                          "context_length=64\nblock_sizes=1,4\nwarmup_steps=2\n")
        out = str(tmp_path / "run")
        assert main(["train-denoiser", "--corpus", corpus_file, "--out", out,
                     "--config", str(config), "--steps", "6"]) == 0
        with open(os.path.join(out, "run_config.json")) as fh:
            merged = json.load(fh)
        assert merged["steps"] == 6      # flag wins
        assert merged["seed"] == 2       # config wins over default
        assert merged["layers"] == 2

    def test_unknown_config_key_rejected(self, tmp_path, corpus_file, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("not_a_key=1\n")
        assert main(["train-denoiser", "--corpus", corpus_file,
                     "--out", str(tmp_path / "x"), "--config", str(config)]) == 1
        assert "not_a_key" in capsys.readouterr().err

    def test_env_seed_fallback(self, tmp_path, denoiser_dir, monkeypatch):
        monkeypatch.setenv("CTRLDIFF_SEED", "123")
        outdir = str(tmp_path / "gen")
        assert main(["generate", "--denoiser", denoiser_dir, "--length", "4",
                     "--block", "fixed:4", "--outdir", outdir]) == 0
        with open(os.path.join(outdir, "sample.json")) as fh:
            assert json.load(fh)["seed"] == 123


class TestVerifyCommand:
    def test_ppo_suite_exits_zero(self, capsys):
        assert main(["verify", "--suite", "ppo"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "[ok]" in out
