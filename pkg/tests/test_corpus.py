"""Tokenization, splitting, batching, and synthetic corpus tests."""

import numpy as np
import pytest

from blockdiff.corpus import (
    LabeledExample,
    Tokenizer,
    batches,
    chunk_stream,
    make_sentiment_corpus,
    make_textlike_corpus,
    read_labeled_corpus,
    split_text8,
    write_labeled_corpus,
)
from blockdiff.validation import InvalidInputError


class TestTokenizer:
    def test_alphabet_order(self):
        np.testing.assert_array_equal(Tokenizer().encode("abc"), [0, 1, 2])

    def test_space_after_z(self):
        np.testing.assert_array_equal(Tokenizer().encode("a a"), [0, 26, 0])

    def test_unknown_policy_error(self):
        with pytest.raises(InvalidInputError):
            Tokenizer().encode("A")

    def test_unknown_policy_map_to_space(self):
        tok = Tokenizer(unknown="map_to_space")
        np.testing.assert_array_equal(tok.encode("a!b"), [0, 26, 1])

    def test_roundtrip(self):
        tok = Tokenizer()
        for text in ("hello world", "zigzag", "a" * 50):
            assert tok.decode(tok.encode(text)) == text

    def test_mask_outside_alphabet(self):
        tok = Tokenizer()
        assert tok.mask_id == len(tok.alphabet)
        assert tok.vocab.size_total == 28

    def test_duplicate_alphabet_rejected(self):
        with pytest.raises(InvalidInputError):
            Tokenizer(alphabet="aab")

    def test_ids_below_mask(self):
        ids = Tokenizer().encode("the quick brown fox")
        assert ids.max() < 27


class TestSplit:
    def test_proportional_split(self):
        train, valid = split_text8("x" * 100)
        assert len(train) == 90 and len(valid) == 5

    def test_full_scale_ratio_preserved(self):
        # 90M train / 5M valid at 95M characters, scaled down 1000x.
        train, valid = split_text8("y" * 95_000)
        assert len(train) == 85_500 and len(valid) == 4750

    def test_short_stream_rejected(self):
        with pytest.raises(InvalidInputError):
            split_text8("tiny")
        with pytest.raises(InvalidInputError):
            split_text8("")


class TestBatches:
    def test_chunks_drop_remainder(self):
        rows = chunk_stream(np.arange(10), 4)
        np.testing.assert_array_equal(rows, [[0, 1, 2, 3], [4, 5, 6, 7]])

    def test_chunk_count(self):
        assert chunk_stream(np.arange(1000), 256).shape[0] == 3

    def test_deterministic_order(self):
        stream = np.arange(64)
        a = [b.copy() for b in batches(stream, 8, 2, shuffle_seed=5)]
        b = [b.copy() for b in batches(stream, 8, 2, shuffle_seed=5)]
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_coverage_no_overlap(self):
        stream = np.arange(64)
        seen = np.concatenate([b.ravel() for b in batches(stream, 8, 1, 0)])
        np.testing.assert_array_equal(np.sort(seen), stream)


class TestLabeledCorpus:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "labeled.tsv"
        examples = [LabeledExample("good stuff", 1), LabeledExample("bad stuff", 0)]
        write_labeled_corpus(path, examples)
        assert read_labeled_corpus(path) == examples

    def test_label_range_checked(self, tmp_path):
        path = tmp_path / "labeled.tsv"
        path.write_text("5\tsome text\n")
        with pytest.raises(InvalidInputError):
            read_labeled_corpus(path, n_classes=2)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "labeled.tsv"
        path.write_text("no tab here\n")
        with pytest.raises(InvalidInputError):
            read_labeled_corpus(path)


class TestSynthetic:
    def test_textlike_alphabet_and_length(self):
        text = make_textlike_corpus(5000, seed=0)
        assert len(text) == 5000
        assert set(text) <= set("abcdefghijklmnopqrstuvwxyz ")

    def test_textlike_deterministic(self):
        assert make_textlike_corpus(2000, seed=3) == make_textlike_corpus(2000, seed=3)

    def test_sentiment_balanced_two_class(self):
        examples = make_sentiment_corpus(100, seed=0)
        labels = [e.label for e in examples]
        assert sorted(set(labels)) == [0, 1]
        assert sum(labels) == 50

    def test_sentiment_classes_have_distinct_letters(self):
        # Class-specific (non-neutral) letters land in disjoint halves of
        # the alphabet, which is what makes the task separable.
        examples = make_sentiment_corpus(400, seed=1)
        first_half = set("abcdefghijklm")
        counts = {0: 0, 1: 0}
        totals = {0: 0, 1: 0}
        for ex in examples:
            letters = [c for c in ex.text if c != " "]
            counts[ex.label] += sum(c in first_half for c in letters)
            totals[ex.label] += len(letters)
        assert counts[0] / totals[0] > 0.6
        assert counts[1] / totals[1] < 0.4
