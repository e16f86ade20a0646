"""Block-denoising language model: network, training loop, and estimator.

The network predicts clean tokens from a partially masked block given the
clean text before it.  Training uses a joint [noised; clean] pass so every
block in a batch row is denoised in one forward: noised positions attend
bidirectionally within their block and to clean positions strictly before
it, while the clean stream is causal.  The same machinery, run with
one-token blocks and a fully masked noised stream, scores text left to
right, which is how the package gets an autoregressive scorer without a
second model.

The mask category is never predicted: the output head has one logit per
non-mask token (the mask must be the final vocabulary index).  Positions of
a block that are already unmasked are carried over as exact deltas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import corpus as corpus_mod
from .checkpoint import load_state_dict, save_state_dict
from .diffusion import NoiseSchedule, Vocab
from .transformer import Backbone, two_stream_mask, prefix_block_mask
from .validation import InvalidInputError, as_rng

__all__ = ["DenoiserNet", "DenoiserOutput", "MaskedDiffusionLM", "two_stream_loss"]

#: Logit magnitude used to carry observed tokens through as exact deltas
#: (softmax underflows the other entries to exactly zero in float32/64).
CARRY_LOGIT = 1e4

#: Training times are drawn from U(T_FLOOR, 1): the continuous-time weight
#: diverges at t=0 and the t<T_FLOOR sliver contributes almost no signal.
T_FLOOR = 1e-3


class DenoiserNet(nn.Module):
    """Backbone plus a (vocab-1)-way head over non-mask tokens."""

    def __init__(self, vocab_size: int, hidden_dim: int = 128, heads: int = 4,
                 layers: int = 4, context_length: int = 256):
        super().__init__()
        self.backbone = Backbone(vocab_size, hidden_dim, heads, layers, context_length)
        self.lm_head = nn.Linear(hidden_dim, vocab_size - 1, bias=False)
        nn.init.normal_(self.lm_head.weight, std=0.02)

    @property
    def context_length(self):
        return self.backbone.context_length

    def two_stream(self, noised: torch.Tensor, clean: torch.Tensor, layout):
        """Joint pass over (B, L) noised/clean rows; logits at noised positions."""
        b, l = clean.shape
        self.backbone.check_capacity(l)
        mask = two_stream_mask(layout).to(clean.device)
        positions = torch.cat([torch.arange(l), torch.arange(l)]).to(clean.device)
        ids = torch.cat([noised, clean], dim=1)
        hidden = self.backbone(ids, attn_mask=mask, positions=positions)
        noised_hidden = hidden[:, :l]
        return self.lm_head(noised_hidden), noised_hidden

    def denoise_block(self, prefix: torch.Tensor, block: torch.Tensor):
        """Logits/hidden for one block after a clean causal prefix."""
        p, l = int(prefix.shape[0]), int(block.shape[0])
        self.backbone.check_capacity(p + l)
        mask = prefix_block_mask(p, l).to(block.device)
        ids = torch.cat([prefix, block])[None]
        hidden = self.backbone(ids, attn_mask=mask)
        block_hidden = hidden[0, p:]
        return self.lm_head(block_hidden), block_hidden

    def denoise_with_cache(self, cache, block: torch.Tensor):
        hidden = self.backbone.forward_with_prefix(block, cache)[0]
        return self.lm_head(hidden), hidden

    def encode_prefix(self, prefix: torch.Tensor):
        return self.backbone.encode_prefix(prefix)

    def hidden_states(self, ids: torch.Tensor) -> torch.Tensor:
        """Causal per-position hidden states (final layer, pre-logit)."""
        l = int(ids.shape[0])
        self.backbone.check_capacity(l)
        from .transformer import causal_mask
        return self.backbone(ids[None], attn_mask=causal_mask(l).to(ids.device))[0]

    def ar_logits(self, ids: torch.Tensor, mask_id: int) -> torch.Tensor:
        """Left-to-right next-token logits: one-token blocks, all masked."""
        noised = torch.full_like(ids, mask_id)
        logits, _ = self.two_stream(noised, ids, [1] * ids.shape[1])
        return logits


@dataclass
class DenoiserOutput:
    """Per-position logits over non-mask tokens plus final hidden states.

    Unmasked block positions carry their observed token as an exact delta.
    """

    logits: np.ndarray
    hidden: np.ndarray


def apply_carry_over(logits: torch.Tensor, block: torch.Tensor, mask_id: int):
    """Overwrite logits at unmasked positions with a delta at the observed token."""
    observed = block != mask_id
    if not bool(observed.any()):
        return logits
    out = logits.clone()
    out[observed] = -CARRY_LOGIT
    rows = observed.nonzero(as_tuple=True)[0]
    out[rows, block[observed]] = CARRY_LOGIT
    return out


def two_stream_loss(net: DenoiserNet, x0: torch.Tensor, masked: torch.Tensor,
                    block_weights: torch.Tensor, layout, mask_id: int):
    """Block-summed masked cross-entropy, normalized per token.

    ``block_weights`` holds the per-(row, block) schedule weight; masked
    positions of block j in row b contribute weight[b, j] * -log p(x0).
    """
    noised = torch.where(masked, torch.full_like(x0, mask_id), x0)
    logits, _ = net.two_stream(noised, x0, layout)
    logp = torch.log_softmax(logits, dim=-1)
    token_lp = logp.gather(-1, x0.unsqueeze(-1)).squeeze(-1)
    bids = torch.from_numpy(
        np.repeat(np.arange(len(layout)), layout)
    ).to(x0.device)
    pos_weight = block_weights.to(token_lp.dtype)[:, bids]
    loss = -(token_lp * pos_weight * masked.to(token_lp.dtype)).sum()
    return loss / x0.numel()


def sample_block_corruption(rng: np.random.Generator, n_rows: int, layout,
                            schedule: NoiseSchedule, t_floor: float = T_FLOOR):
    """Draw per-(row, block) times and the induced position mask.

    Times are uniform on (t_floor, 1]; each position is masked with
    probability 1 - alpha(t) of its block's time.  Returns (times, masked,
    weights) as numpy arrays.
    """
    n_blocks = len(layout)
    times = rng.uniform(t_floor, 1.0, size=(n_rows, n_blocks))
    weights = np.vectorize(schedule.weight)(times)
    mask_prob = 1.0 - np.vectorize(schedule.alpha)(times)
    bids = np.repeat(np.arange(n_blocks), layout)
    per_pos = mask_prob[:, bids]
    masked = rng.random(per_pos.shape) < per_pos
    return times, masked, weights


class MaskedDiffusionLM(BaseEstimator):
    """Character-level semi-autoregressive masked-diffusion language model.

    ``fit`` trains the denoiser on a raw text corpus; the fitted estimator
    exposes block denoising, causal hidden states, autoregressive scoring,
    sampling, and a Monte-Carlo likelihood bound.  All randomness is seeded.
    """

    def __init__(self, layers=4, hidden_dim=128, heads=4, context_length=256,
                 learn_rate=3e-4, warmup_steps=2500, batch_size=8, steps=10000,
                 block_sizes=(1, 4, 8, 16), weight_decay=0.01, grad_clip=1.0,
                 alphabet=corpus_mod.DEFAULT_ALPHABET, unknown="error",
                 schedule="log_linear", seed=0, log_every=100):
        self.layers = layers
        self.hidden_dim = hidden_dim
        self.heads = heads
        self.context_length = context_length
        self.learn_rate = learn_rate
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.steps = steps
        self.block_sizes = block_sizes
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.alphabet = alphabet
        self.unknown = unknown
        self.schedule = schedule
        self.seed = seed
        self.log_every = log_every

    # -- construction helpers ------------------------------------------------

    def _build(self):
        if self.hidden_dim % self.heads:
            raise InvalidInputError("hidden_dim must be divisible by heads")
        self.tokenizer_ = corpus_mod.Tokenizer(self.alphabet, self.unknown)
        self.vocab_ = self.tokenizer_.vocab
        self.schedule_ = NoiseSchedule(self.schedule)
        torch.manual_seed(self.seed)
        self.model_ = DenoiserNet(
            self.vocab_.size_total, self.hidden_dim, self.heads,
            self.layers, self.context_length,
        )
        self.model_.eval()
        self._prefix_cache = (None, None)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("estimator has not been fitted; call fit() first")

    def _ids(self, text_or_ids) -> np.ndarray:
        if isinstance(text_or_ids, str):
            return self.tokenizer_.encode(text_or_ids)
        return np.asarray(text_or_ids, dtype=np.int64)

    # -- training ------------------------------------------------------------

    def fit(self, corpus_text, log_fn=None):
        """Train on a raw text corpus (or a pre-encoded id array)."""
        self._build()
        stream = self._ids(corpus_text)
        rows = corpus_mod.chunk_stream(stream, self.context_length)
        if rows.shape[0] < self.batch_size:
            raise InvalidInputError(
                f"corpus yields {rows.shape[0]} rows of length "
                f"{self.context_length}; need at least {self.batch_size}"
            )
        for size in self.block_sizes:
            if self.context_length % size:
                raise InvalidInputError(
                    f"block size {size} does not divide context {self.context_length}"
                )
        rng = as_rng(self.seed)
        opt = torch.optim.AdamW(self.model_.parameters(), lr=self.learn_rate,
                                betas=(0.9, 0.999), weight_decay=self.weight_decay)
        self.model_.train()
        self.loss_trace_ = []
        n_rows = rows.shape[0]
        for step in range(self.steps):
            lr_scale = min(1.0, (step + 1) / max(self.warmup_steps, 1))
            for group in opt.param_groups:
                group["lr"] = self.learn_rate * lr_scale
            idx = rng.integers(0, n_rows, size=self.batch_size)
            x0 = torch.from_numpy(rows[idx])
            size = int(rng.choice(list(self.block_sizes)))
            layout = [size] * (self.context_length // size)
            _, masked, weights = sample_block_corruption(
                rng, self.batch_size, layout, self.schedule_)
            loss = two_stream_loss(
                self.model_, x0,
                torch.from_numpy(masked),
                torch.from_numpy(weights.astype(np.float32)),
                layout, self.vocab_.mask_id,
            )
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training aborted: non-finite loss {loss.item()!r} at step {step}"
                )
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(self.model_.parameters(), self.grad_clip)
            opt.step()
            self.loss_trace_.append(float(loss.item()))
            if log_fn is not None and (step % self.log_every == 0
                                       or step == self.steps - 1):
                log_fn(step, self.loss_trace_[-1])
        self.model_.eval()
        self._prefix_cache = (None, None)
        return self

    # -- inference surface ---------------------------------------------------

    def denoise(self, noised_block, clean_prefix=()) -> DenoiserOutput:
        """Per-position clean-token logits for a block after a clean prefix.

        Already-unmasked block positions come back as exact deltas at their
        observed token (carry-over).
        """
        self._check_fitted()
        block = torch.from_numpy(self._ids(noised_block))
        prefix = torch.from_numpy(np.asarray(self._ids(clean_prefix)
                                             if len(clean_prefix) else [],
                                             dtype=np.int64))
        with torch.no_grad():
            logits, hidden = self.model_.denoise_block(prefix, block)
            logits = apply_carry_over(logits, block, self.vocab_.mask_id)
        return DenoiserOutput(logits=logits.numpy(), hidden=hidden.numpy())

    def hidden_states(self, tokens) -> np.ndarray:
        """Final-layer causal hidden vectors, one per position."""
        self._check_fitted()
        ids = torch.from_numpy(self._ids(tokens))
        with torch.no_grad():
            return self.model_.hidden_states(ids).numpy()

    def x0_fn(self):
        """Adapter (prefix_ids, block_ids) -> (L', K) clean-token probabilities.

        Memoizes the most recent prefix encoding, so the repeated calls a
        sampler makes within one block pay for the prefix once.
        """
        self._check_fitted()
        mask_id = self.vocab_.mask_id
        k_total = self.vocab_.size_total

        def fn(prefix_ids: np.ndarray, block_ids: np.ndarray) -> np.ndarray:
            key = (len(prefix_ids), prefix_ids.tobytes())
            cached_key, cache = self._prefix_cache
            if cached_key != key:
                with torch.no_grad():
                    cache = self.model_.encode_prefix(
                        torch.from_numpy(np.asarray(prefix_ids, dtype=np.int64)))
                self._prefix_cache = (key, cache)
            block = torch.from_numpy(np.asarray(block_ids, dtype=np.int64))
            with torch.no_grad():
                logits, _ = self.model_.denoise_with_cache(cache, block)
                logits = apply_carry_over(logits, block, mask_id)
                probs = torch.softmax(logits.double(), dim=-1).numpy()
            full = np.zeros((block.shape[0], k_total))
            full[:, :k_total - 1] = probs
            return full

        return fn

    def ar_logprobs(self, tokens) -> np.ndarray:
        """log p(x_i | x_<i) per position, sliding a half-context window."""
        self._check_fitted()
        ids = self._ids(tokens)
        ctx = self.context_length
        out = np.empty(ids.shape[0])
        mask_id = self.vocab_.mask_id
        start, scored = 0, 0
        while scored < ids.shape[0]:
            window = ids[start:start + ctx]
            with torch.no_grad():
                logits = self.model_.ar_logits(
                    torch.from_numpy(window)[None], mask_id)[0]
                logp = torch.log_softmax(logits.double(), dim=-1).numpy()
            local = np.arange(window.shape[0])
            values = logp[local, window]
            take_from = scored - start
            out[scored:start + window.shape[0]] = values[take_from:]
            scored = start + window.shape[0]
            start = max(0, scored - ctx // 2)
        return out

    # -- persistence ---------------------------------------------------------

    def save(self, directory) -> None:
        self._check_fitted()
        save_state_dict(directory, self.model_.state_dict(),
                        config=self.get_params(), kind="denoiser")

    @classmethod
    def load(cls, directory) -> "MaskedDiffusionLM":
        state, config, _ = load_state_dict(directory, expected_kind="denoiser")
        config["block_sizes"] = tuple(config.get("block_sizes", (1, 4, 8, 16)))
        est = cls(**config)
        est._build()
        est.model_.load_state_dict(state)
        est.model_.eval()
        est.loss_trace_ = []
        return est
