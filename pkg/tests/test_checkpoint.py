"""Checkpoint directory format and estimator persistence."""

import json
import os

import numpy as np
import pytest
import torch

from blockdiff.checkpoint import load_state_dict, save_state_dict
from blockdiff.classifier import NoisedSequenceClassifier
from blockdiff.denoiser import MaskedDiffusionLM
from blockdiff.policy import BlockLengthPolicy
from blockdiff.validation import InvalidInputError


class TestFormat:
    def test_manifest_and_raw_tensors(self, tmp_path):
        state = {"layer.weight": torch.arange(6, dtype=torch.float32).view(2, 3),
                 "bias": torch.tensor([1.5])}
        path = tmp_path / "ckpt"
        save_state_dict(path, state, config={"n": 2}, kind="demo")
        with open(path / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        assert manifest["kind"] == "demo"
        assert manifest["config"] == {"n": 2}
        entries = {e["name"]: e for e in manifest["tensors"]}
        assert entries["layer.weight"]["shape"] == [2, 3]
        assert entries["layer.weight"]["dtype"] == "f32le"
        raw = np.fromfile(path / entries["layer.weight"]["file"], dtype="<f4")
        np.testing.assert_array_equal(raw, np.arange(6, dtype=np.float32))

    def test_roundtrip_bitwise(self, tmp_path):
        state = {"w": torch.randn(4, 5)}
        save_state_dict(tmp_path / "c", state, config={}, kind="demo")
        loaded, _, kind = load_state_dict(tmp_path / "c")
        assert kind == "demo"
        torch.testing.assert_close(loaded["w"], state["w"], rtol=0, atol=0)

    def test_kind_mismatch_rejected(self, tmp_path):
        save_state_dict(tmp_path / "c", {"w": torch.zeros(1)}, {}, "demo")
        with pytest.raises(InvalidInputError):
            load_state_dict(tmp_path / "c", expected_kind="other")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(InvalidInputError):
            load_state_dict(tmp_path / "nope")

    def test_overwrite_is_atomic_replace(self, tmp_path):
        path = tmp_path / "c"
        save_state_dict(path, {"w": torch.zeros(2)}, {"v": 1}, "demo")
        save_state_dict(path, {"w": torch.ones(2)}, {"v": 2}, "demo")
        loaded, config, _ = load_state_dict(path)
        torch.testing.assert_close(loaded["w"], torch.ones(2))
        assert config == {"v": 2}
        assert not [d for d in os.listdir(tmp_path) if d.startswith(".ckpt-")]


class TestEstimatorPersistence:
    def test_denoiser_roundtrip(self, tmp_path, tiny_denoiser):
        tiny_denoiser.save(tmp_path / "d")
        loaded = MaskedDiffusionLM.load(tmp_path / "d")
        assert loaded.get_params() == tiny_denoiser.get_params()
        block = np.array([loaded.vocab_.mask_id, 3])
        prefix = loaded.tokenizer_.encode("abc")
        np.testing.assert_array_equal(
            loaded.denoise(block, prefix).logits,
            tiny_denoiser.denoise(block, prefix).logits)

    def test_classifier_roundtrip(self, tmp_path, tiny_classifier):
        tiny_classifier.save(tmp_path / "c")
        loaded = NoisedSequenceClassifier.load(tmp_path / "c")
        np.testing.assert_array_equal(
            loaded.predict_proba("abc nqr"),
            tiny_classifier.predict_proba("abc nqr"))

    def test_policy_roundtrip(self, tmp_path):
        policy = BlockLengthPolicy(feature_dim=16, seed=3).init_untrained()
        with torch.no_grad():
            policy.net_.action_head.weight.normal_(std=0.4)
        policy.save(tmp_path / "p")
        loaded = BlockLengthPolicy.load(tmp_path / "p")
        np.testing.assert_array_equal(loaded.net_.action_probs(None),
                                      policy.net_.action_probs(None))
