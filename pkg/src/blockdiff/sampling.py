"""Semi-autoregressive generation and likelihood-bound estimation.

A denoiser is consumed through a plain adapter ``x0_fn(prefix_ids,
block_ids) -> (L', K)`` returning per-position clean-token probabilities
(zero mass on the mask).  Guidance, when present, is a callable that
rewrites those per-position distributions in place of the unguided ones.

Two samplers produce identical laws on the absorbing process:

- ``first_hitting``: unmask-event times are drawn analytically via
  t_{n-1} = t_n * u^(1/n); each event unmasks one uniformly chosen masked
  position with a token from the (guided, nucleus-filtered) clean-token
  distribution at the current state.
- ``ancestral``: the law of a uniform time grid with ``steps_per_block``
  reverse steps, walked event-wise: each masked position's unmask step is
  drawn from the exact per-step hazards, and positions sharing a step
  sample simultaneously from the same state, exactly as a stepwise walk
  would.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, Vocab
from .validation import InvalidInputError, as_rng, check_token_ids

__all__ = [
    "BlockLayout",
    "SamplerConfig",
    "gumbel_argmax",
    "first_hitting_times",
    "nucleus_filter",
    "generate_block",
    "generate_sequence",
    "sequence_nll_bound",
]

_TINY = 1e-300


@dataclass(frozen=True)
class BlockLayout:
    """A partition of a target length into block lengths."""

    lengths: tuple

    def __post_init__(self):
        lengths = tuple(int(b) for b in self.lengths)
        if not lengths or any(b < 1 for b in lengths):
            raise InvalidInputError("block lengths must be positive")
        object.__setattr__(self, "lengths", lengths)

    @property
    def total(self) -> int:
        return sum(self.lengths)

    @classmethod
    def fixed(cls, total: int, block_size: int) -> "BlockLayout":
        """Blocks of ``block_size`` covering ``total`` (last one truncated)."""
        if total < 1 or block_size < 1:
            raise InvalidInputError("total and block_size must be positive")
        lengths = [block_size] * (total // block_size)
        if total % block_size:
            lengths.append(total % block_size)
        return cls(tuple(lengths))


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "first_hitting"
    steps_per_block: int = 64
    nucleus_p: float = 1.0

    def __post_init__(self):
        if self.mode not in ("first_hitting", "ancestral"):
            raise InvalidInputError(f"unknown sampler mode {self.mode!r}")
        if not (0.0 < self.nucleus_p <= 1.0):
            raise InvalidInputError("nucleus_p must lie in (0, 1]")
        if self.steps_per_block < 1:
            raise InvalidInputError("steps_per_block must be >= 1")


def gumbel_argmax(logits, rng) -> int:
    """Sample a category index distributed as softmax(logits).

    Adds standard Gumbel noise -log(-log u) built from 64-bit uniforms in
    (0, 1); -inf logits mark zero-probability categories and are never
    selected.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(logits)) or np.any(logits == np.inf):
        raise InvalidInputError("logits must not contain NaN or +inf")
    u = np.maximum(rng.random(logits.shape[0]), _TINY)
    return int(np.argmax(logits - np.log(-np.log(u))))


def first_hitting_times(t_start: float, n_masked: int, rng) -> np.ndarray:
    """Unmask-event times t_{n-1} = t_n * u^(1/n), strictly decreasing."""
    if not (0.0 < t_start <= 1.0):
        raise InvalidInputError("t_start must lie in (0, 1]")
    if n_masked < 1:
        raise InvalidInputError("n_masked must be >= 1")
    times = np.empty(n_masked)
    t = float(t_start)
    for i, n in enumerate(range(n_masked, 0, -1)):
        u = max(float(rng.random()), _TINY)
        t = t * u ** (1.0 / n)
        times[i] = t
    return times


def nucleus_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest set of categories with total mass >= p; renormalize."""
    probs = np.asarray(probs, dtype=np.float64)
    if p >= 1.0:
        return probs / probs.sum()
    order = np.argsort(probs)[::-1]
    csum = np.cumsum(probs[order])
    cutoff = int(np.searchsorted(csum, p * csum[-1])) + 1
    out = np.zeros_like(probs)
    kept = order[:cutoff]
    out[kept] = probs[kept]
    return out / out.sum()


def _sample_token(dist: np.ndarray, nucleus_p: float, rng) -> int:
    filtered = nucleus_filter(dist, nucleus_p)
    with np.errstate(divide="ignore"):
        return gumbel_argmax(np.log(filtered), rng)


def _step_hazards(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Per-step unmask probability of one masked position on a uniform grid.

    Memoized on the schedule instance; the grid is fixed per (schedule,
    steps) and samplers ask for it once per block.
    """
    cache = getattr(schedule, "_hazard_cache", None)
    if cache is None:
        cache = {}
        schedule._hazard_cache = cache
    if steps in cache:
        return cache[steps]
    grid = np.linspace(1.0, 0.0, steps + 1)
    hazards = np.empty(steps)
    for k in range(steps):
        a_t = schedule.alpha(grid[k])
        a_s = schedule.alpha(grid[k + 1])
        hazards[k] = (a_s - a_t) / (1.0 - a_t) if a_t < 1.0 else 1.0
    hazards[-1] = 1.0
    cache[steps] = hazards
    return hazards


def generate_block(x0_fn, prefix_ids, block_len: int, schedule: NoiseSchedule,
                   cfg: SamplerConfig, vocab: Vocab, rng, guide_fn=None) -> np.ndarray:
    """Generate one mask-free block of ``block_len`` tokens after a prefix."""
    if block_len < 1:
        raise InvalidInputError("block_len must be >= 1")
    rng = as_rng(rng)
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    xt = np.full(block_len, vocab.mask_id, dtype=np.int64)

    def dist_at(position: int) -> np.ndarray:
        dists = x0_fn(prefix_ids, xt)
        if guide_fn is not None:
            dists = guide_fn(prefix_ids, xt, dists, positions=[position])
        return dists[position]

    if cfg.mode == "first_hitting":
        first_hitting_times(1.0, block_len, rng)  # event clock of the process
        for _ in range(block_len):
            masked = np.flatnonzero(xt == vocab.mask_id)
            pos = int(masked[rng.integers(masked.shape[0])])
            xt[pos] = _sample_token(dist_at(pos), cfg.nucleus_p, rng)
        return xt

    # Ancestral: draw each position's unmask step from the exact per-step
    # hazard law, then resolve steps in order; ties unmask simultaneously
    # from the same state, exactly as the stepwise walk would.
    hazards = _step_hazards(schedule, cfg.steps_per_block)
    survival = np.cumprod(1.0 - hazards)
    cdf = np.concatenate([[0.0], 1.0 - survival])
    cdf[-1] = 1.0
    steps_of = np.searchsorted(cdf, rng.random(block_len), side="right") - 1
    for step in np.unique(steps_of):
        positions = np.flatnonzero(steps_of == step)
        dists = x0_fn(prefix_ids, xt)
        if guide_fn is not None:
            dists = guide_fn(prefix_ids, xt, dists, positions=list(positions))
        tokens = [_sample_token(dists[p], cfg.nucleus_p, rng) for p in positions]
        xt[positions] = tokens
    return xt


def generate_sequence(x0_fn, prompt_ids, length: int, layout_source,
                      schedule: NoiseSchedule, cfg: SamplerConfig, vocab: Vocab,
                      rng, guide_fn=None):
    """Generate ``length`` tokens after a prompt, block by block.

    ``layout_source`` is either a BlockLayout covering ``length`` or a
    callable ``policy(prefix_ids) -> block length`` queried before each
    block.  Returns (ids including the prompt, info) where info records
    per-block lengths and wall-clock seconds.
    """
    rng = as_rng(rng)
    prompt_ids = check_token_ids(np.asarray(prompt_ids, dtype=np.int64),
                                 vocab.size_total, "prompt")
    if np.any(prompt_ids == vocab.mask_id):
        raise InvalidInputError("prompt contains mask tokens")
    if length < 1:
        raise InvalidInputError("length must be >= 1")

    fixed = None
    if isinstance(layout_source, BlockLayout):
        if layout_source.total != length:
            raise InvalidInputError(
                f"layout covers {layout_source.total} tokens, target is {length}"
            )
        fixed = list(layout_source.lengths)

    out = list(prompt_ids)
    lengths, seconds = [], []
    generated = 0
    while generated < length:
        remaining = length - generated
        if fixed is not None:
            block_len = fixed[len(lengths)]
        else:
            block_len = min(int(layout_source(np.asarray(out, dtype=np.int64))),
                            remaining)
        t0 = time.perf_counter()
        block = generate_block(x0_fn, np.asarray(out, dtype=np.int64), block_len,
                               schedule, cfg, vocab, rng, guide_fn=guide_fn)
        seconds.append(time.perf_counter() - t0)
        lengths.append(block_len)
        out.extend(int(v) for v in block)
        generated += block_len
    info = {"block_lengths": lengths, "block_seconds": seconds}
    return np.asarray(out, dtype=np.int64), info


def sequence_nll_bound(x0_fn, x0_ids, layout: BlockLayout, schedule: NoiseSchedule,
                       vocab: Vocab, mc_samples: int, seed) -> float:
    """Monte-Carlo negative-ELBO of a clean sequence, in nats.

    Uses the forced-position form of the masked-diffusion bound: per draw
    and per block, one uniformly chosen position is always masked, every
    other position is masked independently with probability 1 - alpha(t),
    and the estimate is block_len times the cross-entropy at the forced
    position.  Conditioning on the forced position cancels the 1/t weight
    of the naive estimator, so no draw can blow up as t -> 0.
    """
    x0_ids = check_token_ids(x0_ids, vocab.size_total, "x0_ids")
    if np.any(x0_ids == vocab.mask_id):
        raise InvalidInputError("x0 contains mask tokens")
    if layout.total != x0_ids.shape[0]:
        raise InvalidInputError("layout does not cover the sequence")
    if mc_samples < 1:
        raise InvalidInputError("mc_samples must be >= 1")
    rng = as_rng(seed)
    starts = np.concatenate([[0], np.cumsum(layout.lengths)])[:-1]
    total = 0.0
    for start, block_len in zip(starts, layout.lengths):
        prefix = x0_ids[:start]
        block = x0_ids[start:start + block_len]
        block_total = 0.0
        for _ in range(mc_samples):
            t = rng.uniform(0.0, 1.0)
            mask_prob = 1.0 - schedule.alpha(t)
            masked = rng.random(block_len) < mask_prob
            forced = int(rng.integers(block_len))
            masked[forced] = True
            xt = np.where(masked, vocab.mask_id, block)
            dists = x0_fn(prefix, xt)
            p = max(float(dists[forced, block[forced]]), _TINY)
            block_total += -np.log(p) * block_len
        total += block_total / mc_samples
    return float(total)
