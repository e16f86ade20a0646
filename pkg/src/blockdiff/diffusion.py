"""Exact categorical diffusion algebra for the absorbing (masked) process.

Everything here is closed-form probability arithmetic in float64: forward
marginals, reverse posteriors, the general transition-matrix form (kept only
to cross-validate the absorbing specialization), and the per-step training
loss weight.  Conventions:

- A vocabulary has ``size_total`` categories including one mask category.
- The survival schedule ``alpha(t)`` decreases from 1 at t=0 to 0 at t=1;
  a clean token survives to time t with probability ``alpha(t)`` and is
  otherwise replaced by the mask token, which is absorbing.
- Distributions are plain numpy float64 vectors over the full vocabulary.

All operations are pure; randomness enters only through explicit seeds or
``numpy.random.Generator`` instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import (
    InvalidInputError,
    check_probability_vector,
    check_token_ids,
    check_unit_interval,
    as_rng,
)

__all__ = [
    "Vocab",
    "NoiseSchedule",
    "alpha_at",
    "forward_marginal",
    "forward_sample",
    "forward_step",
    "reverse_posterior",
    "posterior_marginalized",
    "transition_matrix",
    "diffusion_loss",
]


@dataclass(frozen=True)
class Vocab:
    """Categorical vocabulary of ``size_total`` categories including the mask.

    By convention the mask occupies the final index, but any index is
    accepted so the algebra stays testable on permuted layouts.
    """

    size_total: int
    mask_id: int | None = None

    def __post_init__(self):
        if self.size_total < 2:
            raise InvalidInputError("vocabulary needs at least one token plus mask")
        mask_id = self.size_total - 1 if self.mask_id is None else int(self.mask_id)
        if not (0 <= mask_id < self.size_total):
            raise InvalidInputError(
                f"mask_id {mask_id} outside [0, {self.size_total})"
            )
        object.__setattr__(self, "mask_id", mask_id)

    @property
    def token_ids(self) -> np.ndarray:
        """Ids of the non-mask categories, in index order."""
        ids = np.arange(self.size_total)
        return ids[ids != self.mask_id]

    def one_hot(self, idx: int) -> np.ndarray:
        v = np.zeros(self.size_total)
        v[idx] = 1.0
        return v


class NoiseSchedule:
    """Monotone survival schedule alpha(t): [0,1] -> [0,1].

    ``log_linear`` is alpha(t) = 1 - t.  ``custom_table`` interpolates a
    user-supplied list of (t, alpha) pairs linearly; the table must start at
    alpha(0)=1, end at alpha(1)=0, and be nonincreasing (checked on a
    1000-point grid at construction).
    """

    GRID_POINTS = 1000

    def __init__(self, kind: str = "log_linear", table=None):
        if kind not in ("log_linear", "custom_table"):
            raise InvalidInputError(f"unknown schedule kind {kind!r}")
        self.kind = kind
        self.table = None
        if kind == "custom_table":
            if not table:
                raise InvalidInputError("custom_table schedule requires a table")
            pts = sorted((float(t), float(a)) for t, a in table)
            self._ts = np.array([p[0] for p in pts])
            self._alphas = np.array([p[1] for p in pts])
            self.table = pts
            self._validate_table()
        elif table is not None:
            raise InvalidInputError("table is only valid with kind='custom_table'")

    def _validate_table(self):
        if self._ts[0] != 0.0 or self._ts[-1] != 1.0:
            raise InvalidInputError("custom table must cover t=0 and t=1")
        grid = np.linspace(0.0, 1.0, self.GRID_POINTS)
        vals = np.interp(grid, self._ts, self._alphas)
        if abs(vals[0] - 1.0) > 1e-9 or abs(vals[-1]) > 1e-9:
            raise InvalidInputError("schedule must satisfy alpha(0)=1, alpha(1)=0")
        if np.any(np.diff(vals) > 1e-12):
            raise InvalidInputError("schedule must be nonincreasing in t")

    def alpha(self, t: float) -> float:
        t = check_unit_interval(t)
        if self.kind == "log_linear":
            return 1.0 - t
        return float(np.interp(t, self._ts, self._alphas))

    def weight(self, t: float, dt: float = 1e-6) -> float:
        """Continuous-time loss weight -alpha'(t) / (1 - alpha(t)).

        Exact 1/t for the log-linear schedule; central finite difference of
        the interpolated table otherwise.
        """
        t = check_unit_interval(t)
        if self.kind == "log_linear":
            if t <= 0.0:
                raise InvalidInputError("loss weight diverges at t=0")
            return 1.0 / t
        lo, hi = max(t - dt, 0.0), min(t + dt, 1.0)
        deriv = (self.alpha(hi) - self.alpha(lo)) / (hi - lo)
        denom = 1.0 - self.alpha(t)
        if denom <= 0.0:
            raise InvalidInputError("loss weight diverges where alpha(t)=1")
        return -deriv / denom

    def __repr__(self):
        return f"NoiseSchedule(kind={self.kind!r})"


def alpha_at(schedule: NoiseSchedule, t: float) -> float:
    """Survival probability alpha(t); domain error outside [0, 1]."""
    return schedule.alpha(t)


def forward_marginal(x0_id: int, alpha_t: float, vocab: Vocab) -> np.ndarray:
    """Marginal of the corrupted token at survival level ``alpha_t``.

    Probability ``alpha_t`` on the clean token, ``1 - alpha_t`` on the mask.
    """
    alpha_t = check_unit_interval(alpha_t, "alpha_t")
    x0_id = int(x0_id)
    if x0_id == vocab.mask_id:
        raise InvalidInputError("clean data never contains the mask token")
    if not (0 <= x0_id < vocab.size_total):
        raise InvalidInputError(f"x0_id {x0_id} outside vocabulary")
    p = np.zeros(vocab.size_total)
    p[x0_id] = alpha_t
    p[vocab.mask_id] += 1.0 - alpha_t
    return p


def forward_sample(x0_ids, t: float, schedule: NoiseSchedule, vocab: Vocab,
                   rng_seed) -> np.ndarray:
    """Corrupt a clean sequence at time t: i.i.d. masking w.p. 1 - alpha(t)."""
    x0_ids = check_token_ids(x0_ids, vocab.size_total, "x0_ids")
    if np.any(x0_ids == vocab.mask_id):
        raise InvalidInputError("clean sequence contains mask tokens")
    alpha = schedule.alpha(t)
    rng = as_rng(rng_seed)
    masked = rng.random(x0_ids.shape) >= alpha
    out = x0_ids.copy()
    out[masked] = vocab.mask_id
    return out


def forward_step(xt_ids, alpha_s: float, alpha_t: float, vocab: Vocab,
                 rng_seed) -> np.ndarray:
    """One Markov corruption step s -> t (t later): survivors re-mask
    independently with probability 1 - alpha_t / alpha_s; masked positions
    are absorbing and never revive.
    """
    alpha_s = check_unit_interval(alpha_s, "alpha_s")
    alpha_t = check_unit_interval(alpha_t, "alpha_t")
    if alpha_t > alpha_s + 1e-12:
        raise InvalidInputError("step must move forward in time (alpha_t <= alpha_s)")
    xt_ids = check_token_ids(xt_ids, vocab.size_total, "xt_ids")
    survive = 1.0 if alpha_s == 0.0 else alpha_t / alpha_s
    rng = as_rng(rng_seed)
    masked = (rng.random(xt_ids.shape) >= survive) & (xt_ids != vocab.mask_id)
    out = xt_ids.copy()
    out[masked] = vocab.mask_id
    return out


def reverse_posterior(xt_id: int, x0_id: int, alpha_s: float, alpha_t: float,
                      vocab: Vocab) -> np.ndarray:
    """True reverse posterior q(x_s | x_t, x_0) of the absorbing process.

    An unmasked x_t is frozen (delta at itself).  A masked x_t unmasks to
    x_0 with probability (alpha_s - alpha_t) / (1 - alpha_t) and stays
    masked with probability (1 - alpha_s) / (1 - alpha_t).
    """
    alpha_s = check_unit_interval(alpha_s, "alpha_s")
    alpha_t = check_unit_interval(alpha_t, "alpha_t")
    if alpha_t > alpha_s + 1e-12:
        raise InvalidInputError("requires alpha_t <= alpha_s (t later than s)")
    x0_id = int(x0_id)
    xt_id = int(xt_id)
    if x0_id == vocab.mask_id:
        raise InvalidInputError("x0 may not be the mask token")
    if xt_id != vocab.mask_id:
        return vocab.one_hot(xt_id)
    if alpha_t >= 1.0:
        raise InvalidInputError("degenerate input: alpha_t=1 with a masked token")
    p = np.zeros(vocab.size_total)
    p[x0_id] = (alpha_s - alpha_t) / (1.0 - alpha_t)
    p[vocab.mask_id] = (1.0 - alpha_s) / (1.0 - alpha_t)
    return p


def posterior_marginalized(xt_id: int, x0_dist, alpha_s: float, alpha_t: float,
                           vocab: Vocab) -> np.ndarray:
    """Reverse posterior with x_0 marginalized under a predicted distribution.

    Computes sum_x0 q(x_s | x_t, x0) * x0_dist(x0) in closed form: an
    unmasked x_t stays a delta; a masked one splits (alpha_s - alpha_t) /
    (1 - alpha_t) of its mass across x0_dist and keeps the rest on the mask.
    """
    x0_dist = check_probability_vector(x0_dist, "x0_dist")
    if x0_dist.shape[0] != vocab.size_total:
        raise InvalidInputError("x0_dist length does not match the vocabulary")
    if x0_dist[vocab.mask_id] > 1e-12:
        raise InvalidInputError("x0_dist places mass on the mask token")
    alpha_s = check_unit_interval(alpha_s, "alpha_s")
    alpha_t = check_unit_interval(alpha_t, "alpha_t")
    if alpha_t > alpha_s + 1e-12:
        raise InvalidInputError("requires alpha_t <= alpha_s (t later than s)")
    xt_id = int(xt_id)
    if xt_id != vocab.mask_id:
        return vocab.one_hot(xt_id)
    if alpha_t >= 1.0:
        raise InvalidInputError("degenerate input: alpha_t=1 with a masked token")
    unmask = (alpha_s - alpha_t) / (1.0 - alpha_t)
    p = unmask * x0_dist
    p[vocab.mask_id] = (1.0 - alpha_s) / (1.0 - alpha_t)
    return p


def transition_matrix(alpha_ts: float, vocab: Vocab) -> np.ndarray:
    """Row-stochastic absorbing transition matrix Q with [Q]_ij = q(j | i).

    Each non-mask row keeps its token with the relative survival
    probability ``alpha_ts = alpha_t / alpha_s`` and otherwise moves to the
    mask; the mask row is the mask one-hot.  Kept for validating that
    matrix products reproduce the closed-form marginals; the generation
    path never builds it.
    """
    alpha_ts = check_unit_interval(alpha_ts, "alpha_ts")
    K = vocab.size_total
    q = alpha_ts * np.eye(K)
    q[:, vocab.mask_id] += 1.0 - alpha_ts
    q[vocab.mask_id] = vocab.one_hot(vocab.mask_id)
    return q


def diffusion_loss(x0_dists, x0_ids, xt_ids, alpha_t: float, alpha_s: float,
                   vocab: Vocab) -> float:
    """Per-step masked-denoising loss for one block.

    Weighted cross-entropy on masked positions only:
    ((alpha_s - alpha_t) / (1 - alpha_t)) * sum_{masked i} -log p_i(x0_i).
    Unmasked positions contribute nothing regardless of their predictions.
    """
    x0_ids = check_token_ids(x0_ids, vocab.size_total, "x0_ids")
    xt_ids = check_token_ids(xt_ids, vocab.size_total, "xt_ids")
    if x0_ids.shape != xt_ids.shape:
        raise InvalidInputError("x0 and xt have different lengths")
    if np.any(x0_ids == vocab.mask_id):
        raise InvalidInputError("clean sequence contains mask tokens")
    consistent = (xt_ids == x0_ids) | (xt_ids == vocab.mask_id)
    if not np.all(consistent):
        raise InvalidInputError("xt is not a masking of x0")
    dists = np.atleast_2d(np.asarray(x0_dists, dtype=np.float64))
    if dists.shape != (x0_ids.shape[0], vocab.size_total):
        raise InvalidInputError(
            f"expected per-position distributions of shape "
            f"({x0_ids.shape[0]}, {vocab.size_total}), got {dists.shape}"
        )
    masked = xt_ids == vocab.mask_id
    if not masked.any():
        return 0.0
    alpha_s = check_unit_interval(alpha_s, "alpha_s")
    alpha_t = check_unit_interval(alpha_t, "alpha_t")
    if alpha_t >= 1.0:
        raise InvalidInputError("degenerate input: masked positions at alpha_t=1")
    weight = (alpha_s - alpha_t) / (1.0 - alpha_t)
    probs = dists[masked, x0_ids[masked]]
    with np.errstate(divide="ignore"):
        nll = -np.log(probs)
    return float(weight * nll.sum())
