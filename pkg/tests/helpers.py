"""Hand-built oracles shared between test modules."""

import numpy as np


class LinearLogitClassifier:
    """Smooth hand-built classifier: logits linear in the one-hot block.

    Small weights keep the log-probability nearly linear, so its first-order
    expansion is accurate; the gradient is analytic.
    """

    def __init__(self, seed: int, length: int, k: int, n_classes: int = 2,
                 scale: float = 0.1):
        self.w = np.random.default_rng(seed).normal(
            0.0, scale, size=(length, k, n_classes))

    def _logits(self, relaxed: np.ndarray) -> np.ndarray:
        return np.einsum("lk,lkn->n", relaxed, self.w)

    def probs_relaxed(self, relaxed: np.ndarray) -> np.ndarray:
        z = self._logits(relaxed)
        e = np.exp(z - z.max())
        return e / e.sum()

    def probs(self, blocks) -> np.ndarray:
        blocks = np.atleast_2d(blocks)
        out = np.empty((blocks.shape[0], self.w.shape[2]))
        for i, block in enumerate(blocks):
            relaxed = np.zeros(self.w.shape[:2])
            relaxed[np.arange(block.shape[0]), block] = 1.0
            out[i] = self.probs_relaxed(relaxed)
        return out

    def grad_log(self, block: np.ndarray, label: int):
        relaxed = np.zeros(self.w.shape[:2])
        relaxed[np.arange(block.shape[0]), block] = 1.0
        p = self.probs_relaxed(relaxed)
        grad = self.w[:, :, label] - np.einsum("n,lkn->lk", p, self.w)
        return float(np.log(p[label])), grad


class RiggedBandit:
    """Single-step episodes; one action strictly dominates."""

    def __init__(self, best_action: int, n_actions: int = 3):
        self.best = best_action
        self.n_actions = n_actions

    def reset(self, rng):
        return None

    def step(self, action, rng):
        return (1.0 if action == self.best else 0.0), None, True
