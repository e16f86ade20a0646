"""Dynamic block-length selection trained with clipped-surrogate PPO.

The policy observes, before each block, a summary of the last M generated
blocks: one mean hidden vector per block (from the language model's causal
hidden states) plus the Shannon entropy of the recent token distribution.
A 1-D convolution over the block summaries, max-pooled over time and
concatenated with the entropy, feeds an MLP trunk with a softmax action
head over the allowed block lengths and a value head (the value head reads
detached features, so value fitting never moves the action distribution).

The reward trades off speed against quality:
reward = lambda1 * (L_b / L_max) - exp(-mean log p(token | context)),
where the second term is the block's perplexity under an autoregressive
scorer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import load_state_dict, save_state_dict
from .metrics import token_entropy
from .sampling import SamplerConfig, generate_block
from .validation import InvalidInputError, as_rng

__all__ = [
    "PolicyState",
    "extract_state",
    "PolicyNet",
    "PPOConfig",
    "Transition",
    "compute_reward",
    "gae_advantages",
    "normalize_advantages",
    "clipped_objective",
    "ppo_update",
    "run_ppo",
    "GenerationEnv",
    "BlockLengthPolicy",
]


@dataclass(frozen=True)
class PolicyState:
    """Policy input: per-block hidden summaries and recent-token entropy."""

    block_summaries: np.ndarray  # (M, hidden_dim)
    pooled: np.ndarray           # (hidden_dim,) weighted average of summaries
    entropy: float               # nats


def extract_state(block_hiddens, token_window, weights=None) -> PolicyState:
    """Summarize the last M blocks for the policy.

    ``block_hiddens`` is a list of (L_b, hidden) matrices, one per block;
    each contributes its positional mean.  ``weights`` pools the summaries
    (uniform by default; manual weights must sum to 1).  The entropy is the
    Shannon entropy in nats of the empirical token distribution over the
    window.
    """
    if not block_hiddens:
        raise InvalidInputError(
            "empty window: use the policy's learned initial state instead"
        )
    summaries = np.stack([np.asarray(h, dtype=np.float64).mean(axis=0)
                          for h in block_hiddens])
    m = summaries.shape[0]
    if weights is None:
        weights = np.full(m, 1.0 / m)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (m,) or abs(weights.sum() - 1.0) > 1e-9:
            raise InvalidInputError("pooling weights must sum to 1, one per block")
    pooled = weights @ summaries
    entropy = token_entropy(np.asarray(token_window, dtype=np.int64))
    return PolicyState(block_summaries=summaries, pooled=pooled, entropy=entropy)


class PolicyNet(nn.Module):
    """Conv1D -> MaxPool -> MLP trunk with softmax action and value heads."""

    def __init__(self, feature_dim: int, n_actions: int, window: int = 4,
                 conv_channels: int = 32, mlp_hidden: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.window = window
        self.conv = nn.Conv1d(feature_dim, conv_channels, kernel_size=3, padding=1)
        self.trunk = nn.Sequential(
            nn.Linear(conv_channels + 1, mlp_hidden), nn.GELU(),
            nn.Linear(mlp_hidden, mlp_hidden), nn.GELU(),
        )
        self.action_head = nn.Linear(mlp_hidden, n_actions)
        self.value_head = nn.Linear(mlp_hidden, 1)
        # Start-of-sequence stand-in for missing block summaries.
        self.initial_summary = nn.Parameter(torch.zeros(feature_dim))
        # Zero action head: the initial policy is exactly uniform.
        nn.init.zeros_(self.action_head.weight)
        nn.init.zeros_(self.action_head.bias)

    def state_tensor(self, state: PolicyState | None):
        """Pad or synthesize the (window, feature_dim) summary matrix."""
        if state is None:
            summaries = self.initial_summary.expand(self.window, -1)
            entropy = torch.zeros(())
        else:
            given = torch.as_tensor(state.block_summaries[-self.window:],
                                    dtype=torch.float32)
            missing = self.window - given.shape[0]
            if missing > 0:
                pad = self.initial_summary.expand(missing, -1)
                summaries = torch.cat([pad, given])
            else:
                summaries = given
            entropy = torch.tensor(float(state.entropy))
        return summaries, entropy

    def forward(self, summaries: torch.Tensor, entropy: torch.Tensor):
        """(B, window, feature_dim) + (B,) -> action logits (B, A), value (B,)."""
        feats = self.conv(summaries.transpose(1, 2)).amax(dim=2)
        s = self.trunk(torch.cat([feats, entropy[:, None]], dim=1))
        logits = self.action_head(s)
        value = self.value_head(s.detach()).squeeze(-1)
        return logits, value

    def act(self, state: PolicyState | None, rng: np.random.Generator):
        """Sample an action index; returns (action, log-prob, value)."""
        summaries, entropy = self.state_tensor(state)
        with torch.no_grad():
            logits, value = self.forward(summaries[None], entropy[None])
            logp = torch.log_softmax(logits.double(), dim=-1)[0].numpy()
        action = int(rng.choice(logp.shape[0], p=np.exp(logp)))
        return action, float(logp[action]), float(value[0])

    def action_probs(self, state: PolicyState | None) -> np.ndarray:
        summaries, entropy = self.state_tensor(state)
        with torch.no_grad():
            logits, _ = self.forward(summaries[None], entropy[None])
        return torch.softmax(logits.double(), dim=-1)[0].numpy()


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 64
    reward_weight: float = 0.5    # lambda1: efficiency-term weight
    learn_rate: float = 3e-3
    update_every: int = 16        # episodes per PPO update
    value_coef: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.clip_eps < 1.0):
            raise InvalidInputError("clip epsilon must lie in (0, 1)")
        if not (0.0 <= self.discount <= 1.0):
            raise InvalidInputError("discount must lie in [0, 1]")


@dataclass
class Transition:
    state: PolicyState | None
    action: int
    reward: float
    log_prob: float
    value: float
    advantage: float = 0.0
    ret: float = 0.0

    def __post_init__(self):
        if self.log_prob > 1e-9:
            raise InvalidInputError("log-probabilities must be <= 0")


def compute_reward(block_log_probs, block_len: int, l_max: int,
                   lambda1: float) -> float:
    """lambda1 * (L_b / L_max) minus the block's scorer perplexity."""
    block_log_probs = np.asarray(block_log_probs, dtype=np.float64)
    if block_log_probs.size == 0 or block_len < 1:
        raise InvalidInputError("reward needs a nonempty block")
    if block_len > l_max:
        raise InvalidInputError("block length exceeds the action-space maximum")
    perplexity = float(np.exp(-block_log_probs.mean()))
    return lambda1 * (block_len / l_max) - perplexity


def gae_advantages(rewards, values, discount: float, gae_lambda: float,
                   last_value: float = 0.0):
    """Generalized advantage estimates and returns for one episode.

    Returns raw (un-normalized) advantages; batch normalization happens at
    update time so hand-checkable identities stay visible here.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise InvalidInputError("rewards and values must align")
    n = rewards.shape[0]
    next_values = np.append(values[1:], last_value)
    deltas = rewards + discount * next_values - values
    advantages = np.empty(n)
    acc = 0.0
    for i in range(n - 1, -1, -1):
        acc = deltas[i] + discount * gae_lambda * acc
        advantages[i] = acc
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    advantages = np.asarray(advantages, dtype=np.float64)
    std = advantages.std()
    if std < 1e-8:
        return advantages - advantages.mean()
    return (advantages - advantages.mean()) / std


def clipped_objective(ratio: torch.Tensor, advantage: torch.Tensor,
                      clip_eps: float) -> torch.Tensor:
    """mean(min(ratio * A, clip(ratio, 1-eps, 1+eps) * A))."""
    clipped = torch.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    return torch.min(ratio * advantage, clipped * advantage).mean()


def ppo_update(policy: PolicyNet, optimizer, transitions, cfg: PPOConfig,
               rng: np.random.Generator) -> dict:
    """Run the clipped-surrogate epochs over one batch of transitions."""
    n = len(transitions)
    stacked = [policy.state_tensor(t.state) for t in transitions]
    summaries = torch.stack([s for s, _ in stacked])
    entropies = torch.stack([e for _, e in stacked])
    actions = torch.tensor([t.action for t in transitions])
    old_logp = torch.tensor([t.log_prob for t in transitions], dtype=torch.float64)
    advantages = torch.from_numpy(
        normalize_advantages(np.array([t.advantage for t in transitions])))
    returns = torch.tensor([t.ret for t in transitions], dtype=torch.float32)

    diag = {"mean_ratio": 0.0, "clip_fraction": 0.0, "objective": 0.0}
    batches = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = torch.from_numpy(order[start:start + cfg.minibatch_size])
            logits, values = policy.forward(summaries[idx], entropies[idx])
            logp = torch.log_softmax(logits, dim=-1)
            new_logp = logp.gather(1, actions[idx][:, None]).squeeze(1)
            ratio = torch.exp(new_logp.double() - old_logp[idx])
            adv = advantages[idx]
            objective = clipped_objective(ratio, adv, cfg.clip_eps)
            value_loss = nn.functional.mse_loss(values, returns[idx])
            loss = -objective + cfg.value_coef * value_loss
            if not torch.isfinite(loss):
                raise RuntimeError("PPO update aborted: non-finite objective")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                diag["mean_ratio"] += float(ratio.mean())
                diag["clip_fraction"] += float(
                    ((ratio - 1.0).abs() > cfg.clip_eps).double().mean())
                diag["objective"] += float(objective)
            batches += 1
    for key in diag:
        diag[key] /= max(batches, 1)
    return diag


def run_ppo(policy: PolicyNet, env, episodes: int, cfg: PPOConfig, seed,
            trace_fn=None):
    """Rollout/update loop over an environment.

    The environment contract: ``reset(rng) -> state`` and
    ``step(action_index, rng) -> (reward, next_state, done)``.  States may
    be None (start of sequence).  Updates run every ``cfg.update_every``
    episodes; behavior log-probs are recorded at rollout time, so the first
    epoch after each sync sees ratios of exactly 1.
    """
    rng = as_rng(seed)
    optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learn_rate)
    pending: list[Transition] = []
    trace = []
    for episode in range(episodes):
        state = env.reset(rng)
        episode_transitions = []
        done = False
        while not done:
            action, logp, value = policy.act(state, rng)
            reward, next_state, done = env.step(action, rng)
            episode_transitions.append(
                Transition(state=state, action=action, reward=reward,
                           log_prob=logp, value=value))
            state = next_state
        rewards = [t.reward for t in episode_transitions]
        values = [t.value for t in episode_transitions]
        advantages, returns = gae_advantages(
            rewards, values, cfg.discount, cfg.gae_lambda)
        for t, adv, ret in zip(episode_transitions, advantages, returns):
            t.advantage, t.ret = float(adv), float(ret)
        pending.extend(episode_transitions)
        trace.append({
            "episode": episode,
            "mean_reward": float(np.mean(rewards)),
            "actions": [t.action for t in episode_transitions],
        })
        if trace_fn is not None:
            trace_fn(trace[-1])
        if (episode + 1) % cfg.update_every == 0 and pending:
            ppo_update(policy, optimizer, pending, cfg, rng)
            pending = []
    return trace


class GenerationEnv:
    """Episode = generate ``target_len`` tokens, one policy action per block."""

    def __init__(self, denoiser, prompts, action_lengths, target_len: int,
                 cfg: PPOConfig, window: int = 4,
                 sampler: SamplerConfig | None = None):
        if not prompts:
            raise InvalidInputError("need at least one prompt")
        self.denoiser = denoiser
        self.prompts = [denoiser.tokenizer_.encode(p) if isinstance(p, str)
                        else np.asarray(p, dtype=np.int64) for p in prompts]
        self.action_lengths = tuple(int(a) for a in action_lengths)
        self.l_max = max(self.action_lengths)
        self.target_len = target_len
        self.cfg = cfg
        self.window = window
        self.sampler = sampler or SamplerConfig(nucleus_p=0.9)
        self.x0_fn = denoiser.x0_fn()

    def _state(self) -> PolicyState | None:
        if not self._block_bounds:
            blocks = [self._ids[:len(self._prompt)]] if len(self._prompt) else []
            bounds = [(0, len(self._prompt))] if len(self._prompt) else []
        else:
            bounds = self._block_bounds
        if not bounds:
            return None
        bounds = bounds[-self.window:]
        hidden = self.denoiser.hidden_states(self._ids)
        window_start = bounds[0][0]
        return extract_state(
            [hidden[a:b] for a, b in bounds],
            np.asarray(self._ids[window_start:], dtype=np.int64),
        )

    def reset(self, rng: np.random.Generator):
        self._prompt = self.prompts[rng.integers(len(self.prompts))]
        self._ids = list(self._prompt)
        self._block_bounds = []
        self._generated = 0
        return self._state()

    def step(self, action: int, rng: np.random.Generator):
        block_len = min(self.action_lengths[action],
                        self.target_len - self._generated)
        prefix = np.asarray(self._ids, dtype=np.int64)
        block = generate_block(self.x0_fn, prefix, block_len,
                               self.denoiser.schedule_, self.sampler,
                               self.denoiser.vocab_, rng)
        start = len(self._ids)
        self._ids.extend(int(v) for v in block)
        self._block_bounds.append((start, len(self._ids)))
        self._generated += block_len
        scores = self.denoiser.ar_logprobs(
            np.asarray(self._ids, dtype=np.int64))[start:]
        reward = compute_reward(scores, block_len, self.l_max,
                                self.cfg.reward_weight)
        done = self._generated >= self.target_len
        return reward, None if done else self._state(), done


class BlockLengthPolicy(BaseEstimator):
    """PPO-trained selector over a discrete set of block lengths."""

    def __init__(self, action_lengths=(4, 8, 16), window=4, feature_dim=128,
                 conv_channels=32, mlp_hidden=64, episodes=500, target_len=64,
                 clip_eps=0.2, discount=0.99, gae_lambda=0.95, epochs=4,
                 minibatch_size=64, reward_weight=0.5, learn_rate=3e-3,
                 update_every=16, seed=0):
        self.action_lengths = action_lengths
        self.window = window
        self.feature_dim = feature_dim
        self.conv_channels = conv_channels
        self.mlp_hidden = mlp_hidden
        self.episodes = episodes
        self.target_len = target_len
        self.clip_eps = clip_eps
        self.discount = discount
        self.gae_lambda = gae_lambda
        self.epochs = epochs
        self.minibatch_size = minibatch_size
        self.reward_weight = reward_weight
        self.learn_rate = learn_rate
        self.update_every = update_every
        self.seed = seed

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(
            clip_eps=self.clip_eps, discount=self.discount,
            gae_lambda=self.gae_lambda, epochs=self.epochs,
            minibatch_size=self.minibatch_size, reward_weight=self.reward_weight,
            learn_rate=self.learn_rate, update_every=self.update_every,
        )

    def _build(self):
        lengths = tuple(int(a) for a in self.action_lengths)
        if any(a < 1 for a in lengths) or list(lengths) != sorted(set(lengths)):
            raise InvalidInputError("action lengths must be strictly increasing")
        torch.manual_seed(self.seed)
        self.net_ = PolicyNet(self.feature_dim, len(lengths), self.window,
                              self.conv_channels, self.mlp_hidden)

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("estimator has not been fitted; call fit() first")

    def fit(self, denoiser, prompts, trace_fn=None):
        """Train against rollouts of the given denoiser on prompt contexts."""
        if denoiser.hidden_dim != self.feature_dim:
            raise InvalidInputError(
                f"feature_dim {self.feature_dim} does not match denoiser "
                f"hidden_dim {denoiser.hidden_dim}"
            )
        self._build()
        env = GenerationEnv(denoiser, prompts, self.action_lengths,
                            self.target_len, self.ppo_config(), self.window)
        self.reward_trace_ = run_ppo(self.net_, env, self.episodes,
                                     self.ppo_config(), self.seed,
                                     trace_fn=trace_fn)
        return self

    def init_untrained(self) -> "BlockLengthPolicy":
        """Build the network without training (uniform initial policy)."""
        self._build()
        self.reward_trace_ = []
        return self

    def layout_fn(self, denoiser, seed):
        """Callable prefix_ids -> block length for generate_sequence."""
        self._check_fitted()
        rng = as_rng(seed)
        window = self.window

        def choose(prefix_ids: np.ndarray) -> int:
            if prefix_ids.shape[0] == 0:
                state = None
            else:
                hidden = denoiser.hidden_states(prefix_ids)
                summaries = _trailing_block_summaries(
                    hidden, tuple(int(a) for a in self.action_lengths), window)
                state = extract_state(
                    summaries, prefix_ids[-sum(len(s) for s in summaries):])
            action, _, _ = self.net_.act(state, rng)
            return int(self.action_lengths[action])

        return choose

    def save(self, directory) -> None:
        self._check_fitted()
        save_state_dict(directory, self.net_.state_dict(),
                        config=self.get_params(), kind="policy")

    @classmethod
    def load(cls, directory) -> "BlockLengthPolicy":
        state, config, _ = load_state_dict(directory, expected_kind="policy")
        config["action_lengths"] = tuple(config.get("action_lengths", (4, 8, 16)))
        est = cls(**config)
        est._build()
        est.net_.load_state_dict(state)
        est.reward_trace_ = []
        return est


def _trailing_block_summaries(hidden: np.ndarray, action_lengths, window: int):
    """Cut the trailing context into pseudo-blocks of the median action size."""
    size = action_lengths[len(action_lengths) // 2]
    pieces = []
    end = hidden.shape[0]
    while end > 0 and len(pieces) < window:
        start = max(0, end - size)
        pieces.append(hidden[start:end])
        end = start
    return list(reversed(pieces))
