"""Classifier-guided reweighting of block distributions.

Three routes compute p(x) * p(label | x)^gamma, normalized:

- ``guided_posterior_exact`` enumerates every block outcome.  It is the
  verification oracle; a capacity guard caps enumeration at 10^6 outcomes.
- ``guided_posterior_factorized`` treats block positions independently:
  each candidate token is scored by the classifier on the current block
  with that single position substituted, and each position normalizes on
  its own.
- ``guided_posterior_taylor`` linearizes the classifier's log-probability
  around the current block, so one gradient supplies every substitution
  score.

All weights are combined in log space.  gamma = 0 short-circuits to the
unguided distributions exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .validation import CapacityError, InvalidInputError

__all__ = [
    "GuidanceConfig",
    "guided_posterior_exact",
    "guided_posterior_factorized",
    "guided_posterior_taylor",
    "make_guide_fn",
]

EXACT_OUTCOME_GUARD = 10 ** 6


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float
    target_label: int
    approx: str = "factorized"

    def __post_init__(self):
        if self.gamma < 0:
            raise InvalidInputError("gamma must be nonnegative")
        if self.approx not in ("exact_oracle", "factorized", "taylor"):
            raise InvalidInputError(f"unknown guidance approximation {self.approx!r}")


def _classifier_probs(classifier_fn, blocks: np.ndarray) -> np.ndarray:
    """Call a classifier on (M, L) blocks, accepting single-block callables."""
    out = np.asarray(classifier_fn(blocks), dtype=np.float64)
    if out.ndim == 2 and out.shape[0] == blocks.shape[0]:
        return out
    return np.stack([np.asarray(classifier_fn(b), dtype=np.float64) for b in blocks])


def guided_posterior_exact(joint, classifier_fn, gamma: float, label: int) -> np.ndarray:
    """Exact guided block distribution over all K^L outcomes.

    ``joint`` has shape (K,) * L; ``classifier_fn`` maps block ids to label
    probabilities.  Returns an array of the same shape.
    """
    joint = np.asarray(joint, dtype=np.float64)
    k = joint.shape[0]
    length = joint.ndim
    if k ** length > EXACT_OUTCOME_GUARD:
        raise CapacityError(
            f"{k}^{length} outcomes exceed the enumeration guard {EXACT_OUTCOME_GUARD}"
        )
    if gamma == 0.0:
        return joint / joint.sum()
    outcomes = np.array(list(itertools.product(range(k), repeat=length)), dtype=np.int64)
    cls = _classifier_probs(classifier_fn, outcomes)[:, label]
    with np.errstate(divide="ignore"):
        logw = np.log(joint.reshape(-1)) + gamma * np.log(cls)
    logw -= logsumexp(logw)
    return np.exp(logw).reshape(joint.shape)


def _row_normalize_logw(probs_row: np.ndarray, extra_logw: np.ndarray) -> np.ndarray:
    """Reweight one categorical row by exp(extra_logw), in log space."""
    support = probs_row > 0
    with np.errstate(divide="ignore"):
        logw = np.where(support, np.log(probs_row, where=support,
                                        out=np.full_like(probs_row, -np.inf))
                        + extra_logw, -np.inf)
    out = np.zeros_like(probs_row)
    norm = logsumexp(logw[support])
    out[support] = np.exp(logw[support] - norm)
    return out


def guided_posterior_factorized(pos_dists, classifier_fn, gamma: float, label: int,
                                xt_block, positions=None) -> np.ndarray:
    """Per-position guided distributions via single-token substitution.

    For position l and candidate token v, the weight is
    p_l(v) * classifier(block with position l set to v)[label]^gamma,
    normalized over the candidates of that position.  Zero-probability
    candidates are never scored, so positions already carried over as
    deltas pass through unchanged.
    """
    pos_dists = np.asarray(pos_dists, dtype=np.float64)
    out = pos_dists / pos_dists.sum(axis=1, keepdims=True)
    if gamma == 0.0:
        return out
    xt_block = np.asarray(xt_block, dtype=np.int64)
    out = out.copy()
    for pos in range(pos_dists.shape[0]) if positions is None else positions:
        candidates = np.flatnonzero(pos_dists[pos] > 0)
        if candidates.shape[0] <= 1:
            continue
        blocks = np.tile(xt_block, (candidates.shape[0], 1))
        blocks[:, pos] = candidates
        cls = _classifier_probs(classifier_fn, blocks)[:, label]
        with np.errstate(divide="ignore"):
            extra = np.full(pos_dists.shape[1], -np.inf)
            extra[candidates] = gamma * np.log(cls)
        out[pos] = _row_normalize_logw(pos_dists[pos], extra)
    return out


def guided_posterior_taylor(pos_dists, grad_fn, gamma: float, label: int,
                            xt_block, positions=None) -> np.ndarray:
    """Per-position guidance with first-order substitution scores.

    ``grad_fn(block_ids, label)`` returns (log p(label | block), gradient of
    that log-probability with respect to the block's one-hot rows).  The
    substitution score for token v at position l is then
    grad[l, v] - grad[l, xt[l]]; one forward/backward covers every (l, v).
    """
    pos_dists = np.asarray(pos_dists, dtype=np.float64)
    out = pos_dists / pos_dists.sum(axis=1, keepdims=True)
    if gamma == 0.0:
        return out
    xt_block = np.asarray(xt_block, dtype=np.int64)
    _, grad = grad_fn(xt_block, label)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape[0] != pos_dists.shape[0]:
        raise InvalidInputError("gradient rows do not match block length")
    out = out.copy()
    for pos in range(pos_dists.shape[0]) if positions is None else positions:
        if np.count_nonzero(pos_dists[pos]) <= 1:
            continue
        score = grad[pos, :pos_dists.shape[1]] - grad[pos, xt_block[pos]]
        out[pos] = _row_normalize_logw(pos_dists[pos], gamma * score)
    return out


def make_guide_fn(classifier, cfg: GuidanceConfig):
    """Bind a trained classifier into a sampler guidance callable.

    The returned function maps (prefix_ids, xt_block, pos_dists, positions)
    to guided per-position distributions.  ``factorized`` scores candidate
    substitutions with batched classifier forwards; ``taylor`` uses one
    input-gradient per call.
    """
    if cfg.approx == "exact_oracle":
        raise InvalidInputError(
            "exact_oracle guidance is an enumeration oracle, not a sampler mode"
        )
    if cfg.gamma == 0.0:
        return lambda prefix, xt, dists, positions=None: dists

    if cfg.approx == "factorized":
        def guide(prefix, xt, dists, positions=None):
            def classifier_fn(blocks):
                return classifier.predict_proba_blocks(np.atleast_2d(blocks), prefix)
            return guided_posterior_factorized(
                dists, classifier_fn, cfg.gamma, cfg.target_label, xt,
                positions=positions)
        return guide

    def guide(prefix, xt, dists, positions=None):
        def grad_fn(block, label):
            return classifier.grad_log_prob(block, prefix, label)
        return guided_posterior_taylor(
            dists, grad_fn, cfg.gamma, cfg.target_label, xt, positions=positions)
    return guide
