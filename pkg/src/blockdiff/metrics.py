"""Quantitative evaluation: likelihood bounds, diversity, control accuracy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .validation import InvalidInputError

__all__ = [
    "MetricReport",
    "bpc",
    "perplexity",
    "generative_perplexity",
    "dist_n",
    "token_entropy",
    "control_accuracy",
]


@dataclass
class MetricReport:
    bpc: float | None = None
    ppl: float | None = None
    gen_ppl: float | None = None
    dist1: float | None = None
    dist2: float | None = None
    dist3: float | None = None
    entropy: float | None = None
    control_accuracy: float | None = None
    tokens_per_second: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def bpc(nll_nats_total: float, char_count: int) -> float:
    """Bits per character: mean negative log2-likelihood per character."""
    if char_count <= 0:
        raise InvalidInputError("char_count must be positive")
    return (nll_nats_total / char_count) / math.log(2)


def perplexity(nll_nats_total: float, token_count: int) -> float:
    """exp of the mean per-token negative log-likelihood."""
    if token_count <= 0:
        raise InvalidInputError("token_count must be positive")
    return math.exp(nll_nats_total / token_count)


def generative_perplexity(samples, scorer) -> float:
    """Mean per-token perplexity of samples under an autoregressive scorer.

    ``scorer`` must expose ``ar_logprobs(ids) -> per-position log p``; the
    scorer handles sliding-window coverage of sequences beyond its context.
    """
    if not samples:
        raise InvalidInputError("no samples to score")
    total_nll = 0.0
    total_tokens = 0
    for ids in samples:
        ids = np.asarray(ids, dtype=np.int64)
        logp = scorer.ar_logprobs(ids)
        total_nll += float(-logp.sum())
        total_tokens += ids.shape[0]
    return perplexity(total_nll, total_tokens)


def dist_n(samples, n: int) -> float:
    """Distinct n-grams over total n-grams, pooled across samples.

    Samples shorter than n are skipped (with a warning via ValueError only
    when nothing remains).
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    seen = set()
    total = 0
    for ids in samples:
        ids = tuple(np.asarray(ids, dtype=np.int64).tolist())
        if len(ids) < n:
            continue
        for i in range(len(ids) - n + 1):
            seen.add(ids[i:i + n])
            total += 1
    if total == 0:
        raise InvalidInputError(f"no sample is long enough for {n}-grams")
    return len(seen) / total


def token_entropy(ids) -> float:
    """Shannon entropy (nats) of the empirical token-id distribution."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return 0.0
    _, counts = np.unique(ids, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def control_accuracy(samples, classifier, target_label: int,
                     prefix_lengths=None) -> float:
    """Fraction of samples whose argmax class equals the target label."""
    if not samples:
        raise InvalidInputError("no samples to classify")
    hits = 0
    for i, ids in enumerate(samples):
        ids = np.asarray(ids, dtype=np.int64)
        skip = 0 if prefix_lengths is None else prefix_lengths[i]
        hits += int(classifier.predict(ids[skip:]) == target_label)
    return hits / len(samples)
