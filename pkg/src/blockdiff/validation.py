"""Input validation helpers shared across the package."""

from __future__ import annotations

import os

import numpy as np

#: Absolute tolerance for "sums to one" checks on probability vectors.
PROB_ATOL = 1e-9

SEED_ENV_VAR = "CTRLDIFF_SEED"


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class CapacityError(RuntimeError):
    """Raised when an input exceeds a model's context capacity."""


def check_unit_interval(t: float, name: str = "t") -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0) or not np.isfinite(t):
        raise InvalidInputError(f"{name} must lie in [0, 1], got {t!r}")
    return t


def check_probability_vector(p: np.ndarray, name: str = "probs") -> np.ndarray:
    """Validate a categorical probability vector (nonnegative, sums to 1)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {p.shape}")
    if np.any(p < -PROB_ATOL) or not np.all(np.isfinite(p)):
        raise InvalidInputError(f"{name} has negative or non-finite entries")
    total = float(p.sum())
    if abs(total - 1.0) > PROB_ATOL:
        raise InvalidInputError(f"{name} sums to {total}, expected 1 within {PROB_ATOL}")
    return p


def check_token_ids(ids, vocab_size: int, name: str = "ids") -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise InvalidInputError(
            f"{name} contains ids outside [0, {vocab_size}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    return ids


def as_rng(seed) -> np.random.Generator:
    """Coerce a seed or Generator into a numpy Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def default_seed(explicit=None) -> int:
    """Resolve a run seed: explicit flag, else CTRLDIFF_SEED env var, else 0."""
    if explicit is not None:
        return int(explicit)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return int(env)
    return 0
