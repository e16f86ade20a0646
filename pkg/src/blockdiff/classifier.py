"""Attribute classifier trained on noised token sequences.

A small bidirectional transformer mean-pools its final hidden states into a
linear head over class labels.  Training corrupts every example with the
forward masking process at a uniformly drawn time, so the classifier stays
calibrated on the partially masked blocks it sees during guided sampling.
The input can be token ids or relaxed per-position probability vectors
(rows of the simplex); the relaxed path exists so guidance can take
gradients of log p(label | input) with respect to the input.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import corpus as corpus_mod
from .checkpoint import load_state_dict, save_state_dict
from .diffusion import NoiseSchedule, forward_sample
from .transformer import Backbone
from .validation import InvalidInputError, as_rng

__all__ = ["ClassifierNet", "NoisedSequenceClassifier"]


class ClassifierNet(nn.Module):
    def __init__(self, vocab_size: int, n_classes: int, hidden_dim: int = 64,
                 heads: int = 4, layers: int = 2, context_length: int = 256):
        super().__init__()
        self.backbone = Backbone(vocab_size, hidden_dim, heads, layers, context_length)
        self.head = nn.Linear(hidden_dim, n_classes)
        nn.init.normal_(self.head.weight, std=0.02)
        nn.init.zeros_(self.head.bias)

    def forward_ids(self, ids: torch.Tensor) -> torch.Tensor:
        self.backbone.check_capacity(ids.shape[1])
        hidden = self.backbone(ids)
        return self.head(hidden.mean(dim=1))

    def forward_embedded(self, embedded: torch.Tensor) -> torch.Tensor:
        self.backbone.check_capacity(embedded.shape[1])
        hidden = self.backbone(embedded=embedded)
        return self.head(hidden.mean(dim=1))


class NoisedSequenceClassifier(BaseEstimator):
    """Label classifier over (possibly masked) character sequences."""

    def __init__(self, layers=2, heads=4, hidden_dim=64, context_length=256,
                 n_classes=2, learn_rate=3e-4, warmup_steps=250, batch_size=32,
                 steps=2000, alphabet=corpus_mod.DEFAULT_ALPHABET, unknown="error",
                 schedule="log_linear", seed=0, log_every=100):
        self.layers = layers
        self.heads = heads
        self.hidden_dim = hidden_dim
        self.context_length = context_length
        self.n_classes = n_classes
        self.learn_rate = learn_rate
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.steps = steps
        self.alphabet = alphabet
        self.unknown = unknown
        self.schedule = schedule
        self.seed = seed
        self.log_every = log_every

    def _build(self):
        self.tokenizer_ = corpus_mod.Tokenizer(self.alphabet, self.unknown)
        self.vocab_ = self.tokenizer_.vocab
        self.schedule_ = NoiseSchedule(self.schedule)
        torch.manual_seed(self.seed)
        self.model_ = ClassifierNet(
            self.vocab_.size_total, self.n_classes, self.hidden_dim,
            self.heads, self.layers, self.context_length,
        )
        self.model_.eval()

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("estimator has not been fitted; call fit() first")

    def _ids(self, text_or_ids) -> np.ndarray:
        if isinstance(text_or_ids, str):
            return self.tokenizer_.encode(text_or_ids)
        return np.asarray(text_or_ids, dtype=np.int64)

    def fit(self, texts, labels, log_fn=None):
        """Train on texts and integer labels, corrupting inputs as it goes."""
        self._build()
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or len(texts) != labels.shape[0]:
            raise InvalidInputError("texts and labels must align")
        if labels.size == 0:
            raise InvalidInputError("no training examples")
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise InvalidInputError(f"labels must lie in [0, {self.n_classes})")
        encoded = [self._ids(t)[: self.context_length] for t in texts]
        rng = as_rng(self.seed)
        opt = torch.optim.AdamW(self.model_.parameters(), lr=self.learn_rate,
                                betas=(0.9, 0.999), weight_decay=0.01)
        self.model_.train()
        self.loss_trace_ = []
        for step in range(self.steps):
            lr_scale = min(1.0, (step + 1) / max(self.warmup_steps, 1))
            for group in opt.param_groups:
                group["lr"] = self.learn_rate * lr_scale
            idx = rng.integers(0, len(encoded), size=self.batch_size)
            crop = min(int(encoded[i].shape[0]) for i in idx)
            batch = np.empty((self.batch_size, crop), dtype=np.int64)
            for row, i in enumerate(idx):
                noised = forward_sample(encoded[i][:crop], rng.uniform(0.0, 1.0),
                                        self.schedule_, self.vocab_, rng)
                batch[row] = noised
            logits = self.model_.forward_ids(torch.from_numpy(batch))
            loss = nn.functional.cross_entropy(
                logits, torch.from_numpy(labels[idx]))
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training aborted: non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(self.model_.parameters(), 1.0)
            opt.step()
            self.loss_trace_.append(float(loss.item()))
            if log_fn is not None and (step % self.log_every == 0
                                       or step == self.steps - 1):
                log_fn(step, self.loss_trace_[-1])
        self.model_.eval()
        return self

    # -- inference -----------------------------------------------------------

    def _with_prefix(self, blocks: np.ndarray, prefix) -> np.ndarray:
        prefix = np.asarray(self._ids(prefix) if len(prefix) else [], dtype=np.int64)
        # Keep the most recent context when prefix + block overflows.
        budget = self.context_length - blocks.shape[1]
        if budget < 0:
            raise InvalidInputError("block longer than classifier context")
        if prefix.shape[0] > budget:
            prefix = prefix[prefix.shape[0] - budget:]
        if prefix.shape[0] == 0:
            return blocks
        tiled = np.tile(prefix, (blocks.shape[0], 1))
        return np.concatenate([tiled, blocks], axis=1)

    def predict_proba_blocks(self, blocks, prefix=()) -> np.ndarray:
        """Label probabilities for (M, L) blocks after a shared prefix."""
        self._check_fitted()
        blocks = np.atleast_2d(np.asarray(blocks, dtype=np.int64))
        ids = self._with_prefix(blocks, prefix)
        with torch.no_grad():
            logits = self.model_.forward_ids(torch.from_numpy(ids))
            return torch.softmax(logits.double(), dim=-1).numpy()

    def predict_proba(self, block, prefix=()) -> np.ndarray:
        """Label distribution for one block (text or ids) after a prefix."""
        return self.predict_proba_blocks(np.atleast_2d(self._ids(block)), prefix)[0]

    def predict(self, block, prefix=()) -> int:
        return int(np.argmax(self.predict_proba(block, prefix)))

    def accuracy(self, texts, labels) -> float:
        labels = np.asarray(labels, dtype=np.int64)
        hits = sum(self.predict(t) == y for t, y in zip(texts, labels))
        return hits / labels.shape[0]

    def grad_log_prob(self, block, prefix, label: int):
        """(log p(label | prefix+block), d log p / d one-hot block rows).

        The block enters as an explicit one-hot matrix multiplied into the
        embedding table, which makes the log-probability differentiable in
        the relaxed input; the gradient is evaluated at the one-hot vertex.
        """
        self._check_fitted()
        block_ids = self._ids(block)
        prefix_ids = self._ids(prefix) if len(prefix) else np.empty(0, dtype=np.int64)
        budget = self.context_length - block_ids.shape[0]
        if budget < 0:
            raise InvalidInputError("block longer than classifier context")
        if prefix_ids.shape[0] > budget:
            prefix_ids = prefix_ids[prefix_ids.shape[0] - budget:]
        embed = self.model_.backbone.embed
        one_hot = torch.zeros(block_ids.shape[0], self.vocab_.size_total,
                              dtype=embed.weight.dtype)
        one_hot[torch.arange(block_ids.shape[0]), torch.from_numpy(block_ids)] = 1.0
        one_hot.requires_grad_(True)
        logp = self._relaxed_logp(one_hot, prefix_ids, label)
        grad, = torch.autograd.grad(logp, one_hot)
        return float(logp.item()), grad.numpy()

    def _relaxed_logp(self, block_probs: torch.Tensor, prefix_ids: np.ndarray,
                      label: int) -> torch.Tensor:
        embed = self.model_.backbone.embed
        block_emb = block_probs @ embed.weight
        if prefix_ids.shape[0]:
            prefix_emb = embed(torch.from_numpy(prefix_ids))
            embedded = torch.cat([prefix_emb, block_emb])[None]
        else:
            embedded = block_emb[None]
        logits = self.model_.forward_embedded(embedded)
        return torch.log_softmax(logits, dim=-1)[0, label]

    def log_prob_relaxed(self, block_probs, prefix=(), label: int = 0) -> float:
        """log p(label | prefix + relaxed block): finite-difference surface.

        ``block_probs`` rows are points of (or near) the simplex; the
        embedding extends linearly off the one-hot vertices.
        """
        self._check_fitted()
        prefix_ids = self._ids(prefix) if len(prefix) else np.empty(0, dtype=np.int64)
        probs = torch.as_tensor(np.asarray(block_probs),
                                dtype=self.model_.backbone.embed.weight.dtype)
        with torch.no_grad():
            return float(self._relaxed_logp(probs, prefix_ids, label))

    # -- persistence ---------------------------------------------------------

    def save(self, directory) -> None:
        self._check_fitted()
        save_state_dict(directory, self.model_.state_dict(),
                        config=self.get_params(), kind="classifier")

    @classmethod
    def load(cls, directory) -> "NoisedSequenceClassifier":
        state, config, _ = load_state_dict(directory, expected_kind="classifier")
        est = cls(**config)
        est._build()
        est.model_.load_state_dict(state)
        est.model_.eval()
        est.loss_trace_ = []
        return est
