"""Brute-force oracle suites behind the ``verify`` subcommand.

Each suite re-derives expected behavior independently of the code under
test — literal nested-loop enumerations, direct law computations, closed
identities — and reports one line per check.  The acceptance tests call
these same functions, so the CLI surface and the test suite certify the
same properties.
"""

from __future__ import annotations

import itertools

import numpy as np
import torch
from scipy.stats import chisquare

from .diffusion import (
    NoiseSchedule,
    Vocab,
    forward_marginal,
    forward_sample,
    forward_step,
    posterior_marginalized,
    reverse_posterior,
    transition_matrix,
)
from .guidance import guided_posterior_exact, guided_posterior_factorized
from .policy import (
    PolicyNet,
    PPOConfig,
    Transition,
    clipped_objective,
    gae_advantages,
    ppo_update,
)
from .sampling import SamplerConfig, generate_block, gumbel_argmax

__all__ = [
    "verify_diffusion",
    "verify_guidance",
    "verify_sampler",
    "verify_ppo",
    "SUITES",
    "tv_distance",
]

ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64)
                              - np.asarray(q, dtype=np.float64)).sum())


class SuiteReport:
    def __init__(self, name: str):
        self.name = name
        self.lines: list[str] = []
        self.ok = True

    def check(self, label: str, passed: bool, detail: str = ""):
        status = "ok" if passed else "FAIL"
        self.lines.append(f"[{status}] {label}" + (f" ({detail})" if detail else ""))
        self.ok &= passed

    def info(self, line: str):
        self.lines.append(f"       {line}")


# ---------------------------------------------------------------------------
# Diffusion algebra
# ---------------------------------------------------------------------------

def verify_diffusion(n_trajectories: int = 10_000, seed: int = 0) -> SuiteReport:
    report = SuiteReport("diffusion")

    # Chapman-Kolmogorov: composing the 0->u marginal with the u->t
    # transition matrix reproduces the 0->t marginal.
    worst = 0.0
    for k in range(2, 6):
        vocab = Vocab(k)
        for a_u in ALPHA_GRID:
            for a_t in ALPHA_GRID:
                if a_t > a_u:
                    continue
                ratio = 1.0 if a_u == 0.0 else a_t / a_u
                q = transition_matrix(ratio, vocab)
                for x0 in vocab.token_ids:
                    p_u = forward_marginal(x0, a_u, vocab)
                    composed = p_u @ q
                    direct = forward_marginal(x0, a_t, vocab)
                    worst = max(worst, float(np.abs(composed - direct).max()))
    report.check("Chapman-Kolmogorov identity (K<=5, 5-point alpha grid)",
                 worst < 1e-12, f"max deviation {worst:.2e}")

    # Posterior consistency: sum_{x_t} q(x_s | x_t, x0) q(x_t | x0) = q(x_s | x0).
    worst = 0.0
    for k in range(2, 6):
        vocab = Vocab(k)
        for a_s in ALPHA_GRID:
            for a_t in ALPHA_GRID:
                if a_t > a_s:
                    continue
                for x0 in vocab.token_ids:
                    p_t = forward_marginal(x0, a_t, vocab)
                    mix = np.zeros(k)
                    for xt in range(k):
                        if p_t[xt] == 0.0:
                            continue
                        mix += p_t[xt] * reverse_posterior(xt, x0, a_s, a_t, vocab)
                    direct = forward_marginal(x0, a_s, vocab)
                    worst = max(worst, float(np.abs(mix - direct).max()))
    report.check("posterior marginalization identity (K<=5)",
                 worst < 1e-12, f"max deviation {worst:.2e}")
    return report


def verify_absorbing(n_trajectories: int = 10_000, seed: int = 0) -> SuiteReport:
    """Randomized trajectory invariants of the absorbing process."""
    report = SuiteReport("absorbing")
    rng = np.random.default_rng(seed)
    vocab = Vocab(8)
    schedule = NoiseSchedule()
    revivals = 0
    mutations = 0
    length = 16
    for _ in range(n_trajectories):
        x0 = rng.integers(0, vocab.size_total - 1, size=length)
        # Forward: random increasing times, stepwise corruption.
        times = np.sort(rng.uniform(0.0, 1.0, size=3))
        xt = forward_sample(x0, times[0], schedule, vocab, rng)
        for i in range(1, times.shape[0]):
            was_masked = xt == vocab.mask_id
            xt = forward_step(xt, schedule.alpha(times[i - 1]),
                              schedule.alpha(times[i]), vocab, rng)
            revivals += int(np.any(was_masked & (xt != vocab.mask_id)))
        # Reverse: random predicted x0 distributions, grid walk to t=0.
        grid = np.linspace(times[-1], 0.0, 5)
        state = xt.copy()
        for j in range(grid.shape[0] - 1):
            a_t, a_s = schedule.alpha(grid[j]), schedule.alpha(grid[j + 1])
            for pos in range(length):
                before = state[pos]
                dist = np.zeros(vocab.size_total)
                probs = rng.dirichlet(np.ones(vocab.size_total - 1))
                dist[vocab.token_ids] = probs
                post = posterior_marginalized(state[pos], dist, a_s, a_t, vocab)
                state[pos] = rng.choice(vocab.size_total, p=post / post.sum())
                if before != vocab.mask_id and state[pos] != before:
                    mutations += 1
    report.check(f"forward: zero mask revivals over {n_trajectories} trajectories",
                 revivals == 0, f"revivals={revivals}")
    report.check(f"reverse: zero unmasked-token mutations over {n_trajectories} "
                 "trajectories", mutations == 0, f"mutations={mutations}")
    return report


# ---------------------------------------------------------------------------
# Guidance
# ---------------------------------------------------------------------------

def _hand_guided_joint(joint: np.ndarray, cls_table: np.ndarray, gamma: float,
                       label: int) -> np.ndarray:
    """Literal product-and-normalize enumeration (the independent oracle)."""
    k = joint.shape[0]
    length = joint.ndim
    out = np.zeros_like(joint)
    for outcome in itertools.product(range(k), repeat=length):
        out[outcome] = joint[outcome] * cls_table[outcome][label] ** gamma
    return out / out.sum()


def verify_guidance(seed: int = 0) -> SuiteReport:
    report = SuiteReport("guidance")
    rng = np.random.default_rng(seed)
    gammas = (0.0, 0.5, 1.0, 2.0)
    worst_exact = 0.0
    worst_reduction = 0.0
    worst_single = 0.0
    for k in (2, 3, 4):
        vocab = Vocab(k)
        for length in (1, 2, 3):
            cls_table = rng.dirichlet(np.ones(2), size=(k,) * length)

            def classifier_fn(blocks, table=cls_table):
                blocks = np.atleast_2d(blocks)
                return np.stack([table[tuple(b)] for b in blocks])

            # Arbitrary (non-product) joint for the enumeration check.
            joint = rng.dirichlet(np.ones(k ** length)).reshape((k,) * length)
            # Product joint with zero mask mass for the factorized comparison.
            factors = np.zeros((length, k))
            factors[:, vocab.token_ids] = rng.dirichlet(
                np.ones(k - 1), size=length)
            product_joint = factors[0]
            for pos in range(1, length):
                product_joint = np.multiply.outer(product_joint, factors[pos])
            all_mask = np.full(length, vocab.mask_id, dtype=np.int64)

            for gamma in gammas:
                got = guided_posterior_exact(joint, classifier_fn, gamma, 0)
                want = _hand_guided_joint(joint, cls_table, gamma, 0)
                worst_exact = max(worst_exact, float(np.abs(got - want).max()))
                if gamma == 0.0:
                    worst_reduction = max(worst_reduction, float(
                        np.abs(got - joint / joint.sum()).max()))
                    fact0 = guided_posterior_factorized(
                        factors, classifier_fn, 0.0, 0, all_mask)
                    worst_reduction = max(worst_reduction, float(
                        np.abs(fact0 - factors).max()))

                exact_prod = guided_posterior_exact(
                    product_joint, classifier_fn, gamma, 0)
                fact = guided_posterior_factorized(
                    factors, classifier_fn, gamma, 0, all_mask)
                if length == 1:
                    worst_single = max(worst_single, float(
                        np.abs(exact_prod - fact[0]).max()))
                tvs = []
                for pos in range(length):
                    axes = tuple(a for a in range(length) if a != pos)
                    marginal = exact_prod.sum(axis=axes) if axes else exact_prod
                    tvs.append(tv_distance(marginal, fact[pos]))
                report.info(
                    f"K={k} L'={length} gamma={gamma}: "
                    f"TV(exact marginal, factorized) max={max(tvs):.4f}"
                )

    report.check("exact oracle matches literal enumeration (1e-12)",
                 worst_exact < 1e-12, f"max deviation {worst_exact:.2e}")
    report.check("gamma=0 reduces to the unguided distribution (1e-12)",
                 worst_reduction < 1e-12, f"max deviation {worst_reduction:.2e}")
    report.check("factorized equals exact at block length 1 (1e-12)",
                 worst_single < 1e-12, f"max deviation {worst_single:.2e}")

    # Label-uniform classifier leaves the exact posterior unguided.
    vocab = Vocab(3)
    joint = rng.dirichlet(np.ones(9)).reshape(3, 3)
    uniform_fn = lambda blocks: np.full((np.atleast_2d(blocks).shape[0], 2), 0.5)
    got = guided_posterior_exact(joint, uniform_fn, 2.0, 1)
    dev = float(np.abs(got - joint / joint.sum()).max())
    report.check("label-uniform classifier cancels in normalization",
                 dev < 1e-12, f"max deviation {dev:.2e}")
    return report


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def make_oracle_denoiser(seed: int = 0, k: int = 4):
    """Deterministic table denoiser on a K=3+mask, length-2 block.

    Returns (x0_fn, vocab): the per-position clean-token distributions are
    an arbitrary seeded function of the current block state.
    """
    vocab = Vocab(k)
    rng = np.random.default_rng(seed)
    table = np.zeros((k, k, 2, k))
    table[..., vocab.token_ids] = rng.dirichlet(
        np.ones(k - 1), size=(k, k, 2))

    def x0_fn(prefix_ids, block_ids):
        return table[block_ids[0], block_ids[1]]

    return x0_fn, vocab


def exact_block_law(x0_fn, vocab: Vocab) -> np.ndarray:
    """Enumerated law of one-position-at-a-time unmasking on a 2-block.

    Averages the two position orders (each chosen with probability 1/2)
    and sums over the first token; this is the exact law of both samplers
    in the fine-grid limit.
    """
    k = vocab.size_total
    mask = vocab.mask_id
    law = np.zeros((k, k))
    both = np.array([mask, mask])
    for first_pos in (0, 1):
        d_first = x0_fn(np.empty(0, dtype=np.int64), both)[first_pos]
        for v1 in range(k):
            if d_first[v1] == 0.0:
                continue
            partial = both.copy()
            partial[first_pos] = v1
            d_second = x0_fn(np.empty(0, dtype=np.int64), partial)[1 - first_pos]
            for v2 in range(k):
                outcome = [0, 0]
                outcome[first_pos] = v1
                outcome[1 - first_pos] = v2
                law[outcome[0], outcome[1]] += 0.5 * d_first[v1] * d_second[v2]
    return law


def verify_sampler(n_samples: int = 100_000, seed: int = 0,
                   ancestral_steps: int = 2000) -> SuiteReport:
    report = SuiteReport("sampler")
    x0_fn, vocab = make_oracle_denoiser(seed)
    schedule = NoiseSchedule()
    law = exact_block_law(x0_fn, vocab)

    counts = {}
    for mode, steps in (("first_hitting", 1), ("ancestral", ancestral_steps)):
        cfg = SamplerConfig(mode=mode, steps_per_block=steps, nucleus_p=1.0)
        rng = np.random.default_rng(seed + 1)
        c = np.zeros_like(law)
        for _ in range(n_samples):
            block = generate_block(x0_fn, np.empty(0, dtype=np.int64), 2,
                                   schedule, cfg, vocab, rng)
            c[block[0], block[1]] += 1
        counts[mode] = c / n_samples
        tv = tv_distance(counts[mode].ravel(), law.ravel())
        report.check(
            f"{mode} law matches enumeration (TV<0.01 at {n_samples} samples)",
            tv < 0.01, f"TV={tv:.4f}")
    tv_pair = tv_distance(counts["first_hitting"].ravel(),
                          counts["ancestral"].ravel())
    report.check("first-hitting and fine-grid ancestral laws agree (TV<0.01)",
                 tv_pair < 0.01, f"TV={tv_pair:.4f}")
    return report


def verify_gumbel(n_draws: int = 1_000_000, seed: int = 0) -> SuiteReport:
    report = SuiteReport("gumbel")
    vectors = (
        np.zeros(4),
        np.log(np.array([1.0, 3.0, 1.0, 5.0])),
        np.array([0.3, -0.7, 1.1, 0.0]),
    )
    rng = np.random.default_rng(seed)
    for logits in vectors:
        counts = np.zeros(4)
        for _ in range(n_draws):
            counts[gumbel_argmax(logits, rng)] += 1
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        stat, pvalue = chisquare(counts, probs * n_draws)
        report.check(
            f"gumbel_argmax chi-square vs softmax({np.round(logits, 2).tolist()})",
            pvalue > 0.001, f"p={pvalue:.4f}")
    return report


# ---------------------------------------------------------------------------
# PPO identities
# ---------------------------------------------------------------------------

def _dummy_transitions(n: int, advantage: float, rng) -> list:
    out = []
    for _ in range(n):
        state = None
        out.append(Transition(state=state, action=int(rng.integers(3)),
                              reward=0.0, log_prob=float(-np.log(3)),
                              value=0.0, advantage=advantage, ret=0.0))
    return out


def verify_ppo(seed: int = 0) -> SuiteReport:
    report = SuiteReport("ppo")
    rng = np.random.default_rng(seed)

    # Hand case: single ratio 1.5, eps 0.2, advantage 1 -> min(1.5, 1.2).
    value = float(clipped_objective(torch.tensor([1.5], dtype=torch.float64),
                                    torch.tensor([1.0], dtype=torch.float64), 0.2))
    report.check("clipped objective hand case (1.5, eps=0.2, A=1) -> 1.2",
                 abs(value - 1.2) < 1e-12, f"got {value}")

    # Ratio 1 everywhere: objective equals the mean advantage.
    adv = torch.tensor(rng.normal(size=16))
    value = float(clipped_objective(torch.ones(16, dtype=torch.float64), adv, 0.2))
    report.check("ratio-1 objective equals mean advantage",
                 abs(value - float(adv.mean())) < 1e-12, f"got {value}")

    # Zero advantages: zero gradient and an unchanged action distribution.
    torch.manual_seed(seed)
    policy = PolicyNet(feature_dim=8, n_actions=3, window=2)
    with torch.no_grad():
        policy.action_head.weight.normal_(std=0.1)
    transitions = _dummy_transitions(12, advantage=0.0, rng=rng)
    stacked = [policy.state_tensor(t.state) for t in transitions]
    summaries = torch.stack([s for s, _ in stacked])
    entropies = torch.stack([e for _, e in stacked])
    logits, _ = policy.forward(summaries, entropies)
    logp = torch.log_softmax(logits, dim=-1)
    new_logp = logp.gather(
        1, torch.tensor([t.action for t in transitions])[:, None]).squeeze(1)
    ratio = torch.exp(new_logp - torch.tensor([t.log_prob for t in transitions]))
    objective = clipped_objective(ratio, torch.zeros(12, dtype=ratio.dtype), 0.2)
    grads = torch.autograd.grad(objective, list(policy.parameters()),
                                allow_unused=True)
    grad_norm = sum(float(g.abs().sum()) for g in grads if g is not None)
    report.check("zero-advantage batch has zero policy gradient",
                 grad_norm == 0.0, f"|grad|={grad_norm}")

    before = policy.action_probs(None).copy()
    opt = torch.optim.Adam(policy.parameters(), lr=1e-2)
    ppo_update(policy, opt, transitions, PPOConfig(), rng)
    after = policy.action_probs(None)
    dev = float(np.abs(before - after).max())
    report.check("zero-advantage update leaves the action distribution unchanged",
                 dev < 1e-12, f"max change {dev:.2e}")

    # GAE with lambda=1, gamma=1, V=0 equals reward-to-go.
    worst = 0.0
    for _ in range(5):
        rewards = rng.normal(size=3)
        adv, _ = gae_advantages(rewards, np.zeros(3), 1.0, 1.0)
        rtg = np.cumsum(rewards[::-1])[::-1]
        worst = max(worst, float(np.abs(adv - rtg).max()))
    adv, _ = gae_advantages([1.0, 1.0, 1.0], np.zeros(3), 1.0, 1.0)
    exact = float(np.abs(adv - np.array([3.0, 2.0, 1.0])).max())
    report.check("GAE(lambda=1, gamma=1, V=0) equals reward-to-go",
                 worst < 1e-12 and exact < 1e-12, f"max deviation {worst:.2e}")
    return report


SUITES = {
    "diffusion": lambda: [verify_diffusion(), verify_absorbing()],
    "guidance": lambda: [verify_guidance()],
    "sampler": lambda: [verify_sampler(), verify_gumbel()],
    "ppo": lambda: [verify_ppo()],
}
