"""Sampler tests: Gumbel draws, event times, block and sequence generation,
and the Monte-Carlo likelihood bound against an exact tiny joint."""

import numpy as np
import pytest

from blockdiff.diffusion import NoiseSchedule, Vocab
from blockdiff.sampling import (
    BlockLayout,
    SamplerConfig,
    first_hitting_times,
    generate_block,
    generate_sequence,
    gumbel_argmax,
    nucleus_filter,
    sequence_nll_bound,
)
from blockdiff.validation import InvalidInputError
from blockdiff.verify import exact_block_law, make_oracle_denoiser, tv_distance

SCHEDULE = NoiseSchedule()


class FakeRng:
    """Deterministic uniform source for injecting hand-picked draws."""

    def __init__(self, values):
        self.values = list(values)

    def random(self, n=None):
        if n is None:
            return self.values.pop(0)
        return np.array([self.values.pop(0) for _ in range(n)])


class TestGumbel:
    def test_single_category(self):
        assert gumbel_argmax([0.0], np.random.default_rng(0)) == 0

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(1)
        counts = np.zeros(2)
        n = 1_000_000
        for _ in range(n):
            counts[gumbel_argmax([0.0, 0.0], rng)] += 1
        assert abs(counts[0] / n - 0.5) < 0.002

    def test_log_odds_frequencies(self):
        rng = np.random.default_rng(2)
        logits = np.log([1.0, 3.0])
        counts = np.zeros(2)
        n = 1_000_000
        for _ in range(n):
            counts[gumbel_argmax(logits, rng)] += 1
        assert abs(counts[0] / n - 0.25) < 0.002
        assert abs(counts[1] / n - 0.75) < 0.002

    def test_neg_inf_never_selected(self):
        rng = np.random.default_rng(3)
        logits = np.array([-np.inf, 0.0, -np.inf])
        assert all(gumbel_argmax(logits, rng) == 1 for _ in range(100))

    def test_rejects_nan_and_pos_inf(self):
        rng = np.random.default_rng(0)
        with pytest.raises(InvalidInputError):
            gumbel_argmax([np.nan, 0.0], rng)
        with pytest.raises(InvalidInputError):
            gumbel_argmax([np.inf, 0.0], rng)


class TestFirstHittingTimes:
    def test_u_one_keeps_time(self):
        np.testing.assert_allclose(
            first_hitting_times(1.0, 1, FakeRng([1.0])), [1.0])

    def test_single_halving(self):
        np.testing.assert_allclose(
            first_hitting_times(1.0, 1, FakeRng([0.5])), [0.5])

    def test_two_event_hand_case(self):
        # 0.8 * 0.25^(1/2) = 0.4, then 0.4 * 0.5^(1/1) = 0.2.
        np.testing.assert_allclose(
            first_hitting_times(0.8, 2, FakeRng([0.25, 0.5])), [0.4, 0.2])

    def test_strictly_decreasing_in_range(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            times = first_hitting_times(1.0, 8, rng)
            assert np.all(np.diff(times) < 0)
            assert times[0] <= 1.0 and times[-1] > 0.0

    def test_invalid_inputs(self):
        rng = np.random.default_rng(0)
        with pytest.raises(InvalidInputError):
            first_hitting_times(0.0, 3, rng)
        with pytest.raises(InvalidInputError):
            first_hitting_times(0.5, 0, rng)


class TestNucleus:
    def test_p_one_only_renormalizes(self):
        probs = np.array([0.6, 0.3, 0.1])
        np.testing.assert_allclose(nucleus_filter(probs, 1.0), probs)

    def test_truncates_tail(self):
        probs = np.array([0.6, 0.3, 0.1])
        np.testing.assert_allclose(nucleus_filter(probs, 0.5), [1.0, 0, 0])
        np.testing.assert_allclose(nucleus_filter(probs, 0.9),
                                   [2 / 3, 1 / 3, 0])


class TestGenerateBlock:
    def test_single_event_uses_one_denoiser_call(self):
        x0_fn, vocab = make_oracle_denoiser(seed=0)
        calls = []

        def counting(prefix, block):
            calls.append(block.copy())
            return x0_fn(prefix, np.array([block[0], vocab.mask_id]))[:1]

        cfg = SamplerConfig(mode="first_hitting", nucleus_p=1.0)
        block = generate_block(counting, np.empty(0, dtype=np.int64), 1,
                               SCHEDULE, cfg, vocab, np.random.default_rng(0))
        assert len(calls) == 1
        assert block.shape == (1,) and block[0] != vocab.mask_id

    @pytest.mark.parametrize("mode,steps", [("first_hitting", 1),
                                            ("ancestral", 512)])
    def test_block_law_close_to_enumeration(self, mode, steps):
        x0_fn, vocab = make_oracle_denoiser(seed=3)
        law = exact_block_law(x0_fn, vocab)
        cfg = SamplerConfig(mode=mode, steps_per_block=steps, nucleus_p=1.0)
        rng = np.random.default_rng(9)
        counts = np.zeros_like(law)
        n = 20_000
        for _ in range(n):
            b = generate_block(x0_fn, np.empty(0, dtype=np.int64), 2,
                               SCHEDULE, cfg, vocab, rng)
            counts[b[0], b[1]] += 1
        assert tv_distance(counts.ravel() / n, law.ravel()) < 0.02

    def test_output_mask_free(self):
        x0_fn, vocab = make_oracle_denoiser(seed=1)
        for mode in ("first_hitting", "ancestral"):
            cfg = SamplerConfig(mode=mode, steps_per_block=16, nucleus_p=0.9)
            block = generate_block(x0_fn, np.empty(0, dtype=np.int64), 2,
                                   SCHEDULE, cfg, vocab, np.random.default_rng(4))
            assert np.all(block != vocab.mask_id)


class TestGenerateSequence:
    @staticmethod
    def _uniform_fn(vocab):
        def fn(prefix, block):
            dists = np.zeros((block.shape[0], vocab.size_total))
            dists[:, vocab.token_ids] = 1.0 / (vocab.size_total - 1)
            return dists
        return fn

    def test_fixed_layout_block_count(self):
        vocab = Vocab(4)
        ids, info = generate_sequence(
            self._uniform_fn(vocab), np.empty(0, dtype=np.int64), 8,
            BlockLayout.fixed(8, 4), SCHEDULE, SamplerConfig(), vocab, 0)
        assert info["block_lengths"] == [4, 4]
        assert ids.shape == (8,)

    def test_prompt_verbatim_prefix(self):
        vocab = Vocab(4)
        prompt = np.array([1, 2, 0])
        ids, _ = generate_sequence(
            self._uniform_fn(vocab), prompt, 5, BlockLayout.fixed(5, 4),
            SCHEDULE, SamplerConfig(), vocab, 3)
        np.testing.assert_array_equal(ids[:3], prompt)
        assert ids.shape == (8,)

    def test_deterministic_given_seed(self):
        vocab = Vocab(4)
        runs = [generate_sequence(self._uniform_fn(vocab),
                                  np.empty(0, dtype=np.int64), 12,
                                  BlockLayout.fixed(12, 4), SCHEDULE,
                                  SamplerConfig(), vocab, 7)[0]
                for _ in range(2)]
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_policy_source_truncated_to_remaining(self):
        vocab = Vocab(4)
        ids, info = generate_sequence(
            self._uniform_fn(vocab), np.empty(0, dtype=np.int64), 10,
            lambda prefix: 4, SCHEDULE, SamplerConfig(), vocab, 1)
        assert info["block_lengths"] == [4, 4, 2]
        assert ids.shape == (10,)

    def test_completed_blocks_never_modified(self):
        vocab = Vocab(4)
        seen = {}

        def spy_fn(prefix, block):
            n = len(seen.setdefault("prefixes", []))
            seen["prefixes"].append(prefix.copy())
            return self._uniform_fn(vocab)(prefix, block)

        ids, _ = generate_sequence(spy_fn, np.empty(0, dtype=np.int64), 8,
                                   BlockLayout.fixed(8, 4), SCHEDULE,
                                   SamplerConfig(), vocab, 2)
        for prefix in seen["prefixes"]:
            np.testing.assert_array_equal(prefix, ids[:prefix.shape[0]])

    def test_prompt_with_mask_rejected(self):
        vocab = Vocab(4)
        with pytest.raises(InvalidInputError):
            generate_sequence(self._uniform_fn(vocab),
                              np.array([vocab.mask_id]), 4,
                              BlockLayout.fixed(4, 4), SCHEDULE,
                              SamplerConfig(), vocab, 0)


def exact_pair_oracle(joint: np.ndarray, vocab: Vocab):
    """x0_fn giving the true conditionals of a known two-token joint."""
    marg0 = joint.sum(axis=1)
    marg1 = joint.sum(axis=0)

    def fn(prefix, block):
        k = vocab.size_total
        dists = np.zeros((2, k))
        m0, m1 = block[0] == vocab.mask_id, block[1] == vocab.mask_id
        if m0 and m1:
            dists[0, :k - 1] = marg0
            dists[1, :k - 1] = marg1
        elif m0:
            dists[1, block[1]] = 1.0
            dists[0, :k - 1] = joint[:, block[1]] / marg1[block[1]]
        elif m1:
            dists[0, block[0]] = 1.0
            dists[1, :k - 1] = joint[block[0]] / marg0[block[0]]
        else:
            dists[0, block[0]] = 1.0
            dists[1, block[1]] = 1.0
        return dists

    return fn


class TestNllBound:
    JOINT = np.array([[0.30, 0.05, 0.05],
                      [0.10, 0.20, 0.05],
                      [0.05, 0.05, 0.15]])

    def test_tight_on_exact_conditionals(self):
        """With true conditionals the bound coincides with the joint NLL:
        any unmasking order telescopes to the chain rule."""
        vocab = Vocab(4)
        fn = exact_pair_oracle(self.JOINT, vocab)
        x0 = np.array([1, 0])
        true_nll = -np.log(self.JOINT[1, 0])
        bound = sequence_nll_bound(fn, x0, BlockLayout((2,)), SCHEDULE,
                                   vocab, mc_samples=10_000, seed=0)
        assert bound >= true_nll - 0.05
        assert bound - true_nll < 0.05

    def test_monte_carlo_error_scaling(self):
        """Standard error shrinks like 1/sqrt(mc_samples)."""
        vocab = Vocab(4)
        fn = exact_pair_oracle(self.JOINT, vocab)
        x0 = np.array([2, 2])

        def spread(mc):
            values = [sequence_nll_bound(fn, x0, BlockLayout((2,)), SCHEDULE,
                                         vocab, mc, seed) for seed in range(40)]
            return np.std(values)

        ratio = spread(250) / spread(1000)
        assert 1.4 < ratio < 2.9  # expect ~2

    def test_same_seed_identical(self):
        vocab = Vocab(4)
        fn = exact_pair_oracle(self.JOINT, vocab)
        x0 = np.array([0, 1])
        a = sequence_nll_bound(fn, x0, BlockLayout((2,)), SCHEDULE, vocab, 64, 5)
        b = sequence_nll_bound(fn, x0, BlockLayout((2,)), SCHEDULE, vocab, 64, 5)
        assert a == b

    def test_layout_must_cover_sequence(self):
        vocab = Vocab(4)
        fn = exact_pair_oracle(self.JOINT, vocab)
        with pytest.raises(InvalidInputError):
            sequence_nll_bound(fn, np.array([0, 1, 2]), BlockLayout((2,)),
                               SCHEDULE, vocab, 8, 0)


class TestLayout:
    def test_fixed_truncates_last(self):
        assert BlockLayout.fixed(10, 4).lengths == (4, 4, 2)

    def test_total(self):
        assert BlockLayout((3, 5)).total == 8

    def test_rejects_nonpositive(self):
        with pytest.raises(InvalidInputError):
            BlockLayout((4, 0))

    def test_sampler_config_validation(self):
        with pytest.raises(InvalidInputError):
            SamplerConfig(nucleus_p=0.0)
        with pytest.raises(InvalidInputError):
            SamplerConfig(mode="beam")
