"""Minimal transformer backbone shared by the denoiser and the classifier.

Three attention regimes cover every use in the package, all expressed as
boolean masks over one backbone:

- clean stream: per-position causal (used for prefix encoding, hidden-state
  extraction, and the clean half of the two-stream training pass);
- noised stream: bidirectional within a block, attending to clean context
  strictly before the block;
- full bidirectional (the classifier).

Rotary position encoding is applied to queries and keys.  The prefix KV
cache is exact: prefix keys/values never depend on block positions, so
encoding the prefix separately reproduces the joint forward bit for bit.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import InvalidInputError

__all__ = [
    "Backbone",
    "PrefixCache",
    "causal_mask",
    "full_mask",
    "prefix_block_mask",
    "two_stream_mask",
    "block_ids_from_layout",
]


def block_ids_from_layout(layout) -> np.ndarray:
    """Per-position block index for a list of block lengths."""
    layout = [int(b) for b in layout]
    if any(b < 1 for b in layout):
        raise InvalidInputError("block lengths must be >= 1")
    return np.repeat(np.arange(len(layout)), layout)


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


def full_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool)


def prefix_block_mask(prefix_len: int, block_len: int) -> torch.Tensor:
    """Mask for a clean causal prefix followed by one bidirectional block.

    Block positions attend to the whole prefix and to each other; prefix
    positions attend causally among themselves and never to the block.
    """
    n = prefix_len + block_len
    m = torch.zeros(n, n, dtype=torch.bool)
    m[:prefix_len, :prefix_len] = causal_mask(prefix_len)
    m[prefix_len:, :prefix_len] = True
    m[prefix_len:, prefix_len:] = True
    return m


def two_stream_mask(layout) -> torch.Tensor:
    """Joint mask for the [noised; clean] training pass of length 2L.

    Noised positions see their own noised block (bidirectional) plus clean
    positions strictly before the block.  Clean positions are causal among
    themselves and blind to the noised stream.
    """
    bids = torch.from_numpy(block_ids_from_layout(layout))
    n = bids.shape[0]
    starts = torch.zeros(int(bids.max()) + 1, dtype=torch.long)
    lengths = torch.bincount(bids)
    starts[1:] = torch.cumsum(lengths, 0)[:-1]
    m = torch.zeros(2 * n, 2 * n, dtype=torch.bool)
    same_block = bids[:, None] == bids[None, :]
    m[:n, :n] = same_block
    col = torch.arange(n)
    m[:n, n:] = col[None, :] < starts[bids][:, None]
    m[n:, n:] = causal_mask(n)
    return m


class Rotary(nn.Module):
    """Rotary position encoding applied to query/key head vectors."""

    def __init__(self, head_dim: int, base: float = 10000.0):
        super().__init__()
        if head_dim % 2:
            raise InvalidInputError("head dimension must be even for rotary encoding")
        inv_freq = 1.0 / (base ** (torch.arange(0, head_dim, 2).float() / head_dim))
        self.register_buffer("inv_freq", inv_freq, persistent=False)

    def angles(self, positions: torch.Tensor):
        freqs = positions.to(self.inv_freq.dtype)[:, None] * self.inv_freq[None, :]
        emb = torch.cat([freqs, freqs], dim=-1)
        return emb.cos(), emb.sin()

    @staticmethod
    def rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor):
        # x: (B, H, L, hd); cos/sin: (L, hd)
        half = x.shape[-1] // 2
        x1, x2 = x[..., :half], x[..., half:]
        rotated = torch.cat([-x2, x1], dim=-1)
        return x * cos + rotated * sin


class EncoderLayer(nn.Module):
    def __init__(self, hidden_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden_dim // heads
        self.norm_attn = nn.LayerNorm(hidden_dim)
        self.norm_mlp = nn.LayerNorm(hidden_dim)
        self.wq = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.wk = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.wv = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.wo = nn.Linear(hidden_dim, hidden_dim, bias=False)
        self.mlp_up = nn.Linear(hidden_dim, 4 * hidden_dim)
        self.mlp_down = nn.Linear(4 * hidden_dim, hidden_dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.head_dim).transpose(1, 2)

    def kv(self, x: torch.Tensor, rotary: Rotary, positions: torch.Tensor):
        """Keys/values (rotary applied to keys) for the prefix cache."""
        h = self.norm_attn(x)
        cos, sin = rotary.angles(positions)
        k = Rotary.rotate(self._heads(self.wk(h)), cos, sin)
        v = self._heads(self.wv(h))
        return k, v

    def forward(self, x, rotary, positions, attn_mask, prefix_kv=None):
        h = self.norm_attn(x)
        cos, sin = rotary.angles(positions)
        q = Rotary.rotate(self._heads(self.wq(h)), cos, sin)
        k = Rotary.rotate(self._heads(self.wk(h)), cos, sin)
        v = self._heads(self.wv(h))
        if prefix_kv is not None:
            pk, pv = prefix_kv
            k = torch.cat([pk.expand(k.shape[0], -1, -1, -1), k], dim=2)
            v = torch.cat([pv.expand(v.shape[0], -1, -1, -1), v], dim=2)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        b, _, l, _ = q.shape
        x = x + self.wo(y.transpose(1, 2).reshape(b, l, -1))
        x = x + self.mlp_down(F.gelu(self.mlp_up(self.norm_mlp(x))))
        return x


class PrefixCache:
    """Per-layer rotary-encoded keys/values of a clean, causally encoded prefix."""

    def __init__(self, length: int, kv, hidden: torch.Tensor):
        self.length = length
        self.kv = kv
        self.hidden = hidden


class Backbone(nn.Module):
    """Token embedding + rotary encoder stack + final norm."""

    def __init__(self, vocab_size: int, hidden_dim: int, heads: int, layers: int,
                 context_length: int):
        super().__init__()
        if hidden_dim % heads:
            raise InvalidInputError("hidden_dim must be divisible by heads")
        self.vocab_size = vocab_size
        self.hidden_dim = hidden_dim
        self.context_length = context_length
        self.embed = nn.Embedding(vocab_size, hidden_dim)
        self.rotary = Rotary(hidden_dim // heads)
        self.layers = nn.ModuleList(
            EncoderLayer(hidden_dim, heads) for _ in range(layers)
        )
        self.norm_out = nn.LayerNorm(hidden_dim)
        self.apply(self._init_weights)
        scale = 1.0 / math.sqrt(2 * max(len(self.layers), 1))
        for layer in self.layers:
            with torch.no_grad():
                layer.wo.weight.mul_(scale)
                layer.mlp_down.weight.mul_(scale)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)

    def check_capacity(self, length: int):
        if length > self.context_length:
            from .validation import CapacityError
            raise CapacityError(
                f"sequence of length {length} exceeds context {self.context_length}"
            )

    def forward(self, ids=None, attn_mask=None, positions=None, embedded=None):
        """Encode a batch: ids (B, L) int64 or pre-embedded (B, L, d)."""
        if embedded is None:
            embedded = self.embed(ids)
        b, l, _ = embedded.shape
        if positions is None:
            positions = torch.arange(l, device=embedded.device)
        if attn_mask is not None and attn_mask.dim() == 2:
            attn_mask = attn_mask[None, None]
        x = embedded
        for layer in self.layers:
            x = layer(x, self.rotary, positions, attn_mask)
        return self.norm_out(x)

    def encode_prefix(self, ids: torch.Tensor) -> PrefixCache:
        """Causally encode a clean prefix once; cache per-layer keys/values."""
        length = int(ids.shape[0])
        if length == 0:
            return PrefixCache(0, [None] * len(self.layers), None)
        self.check_capacity(length)
        positions = torch.arange(length, device=ids.device)
        mask = causal_mask(length).to(ids.device)[None, None]
        x = self.embed(ids[None])
        kvs = []
        for layer in self.layers:
            kvs.append(layer.kv(x, self.rotary, positions))
            x = layer(x, self.rotary, positions, mask)
        return PrefixCache(length, kvs, self.norm_out(x)[0])

    def forward_with_prefix(self, block_ids: torch.Tensor, cache: PrefixCache):
        """Encode one block (bidirectional) attending to the cached prefix."""
        l = int(block_ids.shape[-1])
        p = cache.length
        self.check_capacity(p + l)
        block_ids = block_ids.view(-1, l)
        positions = torch.arange(p, p + l, device=block_ids.device)
        x = self.embed(block_ids)
        for layer, kv in zip(self.layers, cache.kv):
            x = layer(x, self.rotary, positions, attn_mask=None, prefix_kv=kv)
        return self.norm_out(x)
