"""Shared fixtures: small trained models reused across test modules."""

import pytest

from blockdiff.classifier import NoisedSequenceClassifier
from blockdiff.corpus import make_sentiment_corpus, make_textlike_corpus
from blockdiff.denoiser import MaskedDiffusionLM


@pytest.fixture(scope="session")
def tiny_corpus() -> str:
    return make_textlike_corpus(60_000, seed=11)


@pytest.fixture(scope="session")
def tiny_denoiser(tiny_corpus) -> MaskedDiffusionLM:
    """A briefly trained small model: functional, not accurate."""
    est = MaskedDiffusionLM(layers=2, hidden_dim=32, heads=2, context_length=64,
                            steps=300, batch_size=4, warmup_steps=30,
                            block_sizes=(1, 4, 8), seed=5)
    return est.fit(tiny_corpus)


@pytest.fixture(scope="session")
def tiny_classifier() -> NoisedSequenceClassifier:
    examples = make_sentiment_corpus(400, seed=7)
    est = NoisedSequenceClassifier(context_length=64, steps=300, batch_size=16,
                                   warmup_steps=30, seed=2)
    return est.fit([e.text for e in examples], [e.label for e in examples])
