"""Text ingestion, character tokenization, batching, and synthetic corpora.

The raw corpus format is a plain UTF-8 text file.  The labeled corpus format
is one example per line, ``label<TAB>text``, with base-10 integer labels
counted from 0.  Batching follows the concatenate-then-wrap policy: the
token stream is chunked into non-overlapping context_length rows (final
partial chunk dropped) and the rows are shuffled with a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import Vocab
from .validation import InvalidInputError, as_rng

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz "

__all__ = [
    "Tokenizer",
    "LabeledExample",
    "split_text8",
    "batches",
    "read_labeled_corpus",
    "write_labeled_corpus",
    "make_textlike_corpus",
    "make_sentiment_corpus",
]


class Tokenizer:
    """Character-level tokenizer over a fixed alphabet.

    The mask category is not part of the alphabet; it is appended as the
    final vocabulary entry, so ``vocab.size_total == len(alphabet) + 1``.
    """

    def __init__(self, alphabet: str = DEFAULT_ALPHABET, unknown: str = "error"):
        if len(set(alphabet)) != len(alphabet):
            raise InvalidInputError("alphabet contains duplicate characters")
        if unknown not in ("error", "map_to_space"):
            raise InvalidInputError(f"unknown policy {unknown!r}")
        if unknown == "map_to_space" and " " not in alphabet:
            raise InvalidInputError("map_to_space requires a space in the alphabet")
        self.alphabet = alphabet
        self.unknown = unknown
        self._to_id = {ch: i for i, ch in enumerate(alphabet)}
        self.vocab = Vocab(size_total=len(alphabet) + 1)

    @property
    def mask_id(self) -> int:
        return self.vocab.mask_id

    def encode(self, text: str) -> np.ndarray:
        if not text:
            raise InvalidInputError("cannot encode empty text")
        ids = np.empty(len(text), dtype=np.int64)
        space = self._to_id.get(" ")
        for i, ch in enumerate(text):
            idx = self._to_id.get(ch)
            if idx is None:
                if self.unknown == "error":
                    raise InvalidInputError(f"character {ch!r} not in alphabet")
                idx = space
            ids[i] = idx
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in np.asarray(ids, dtype=np.int64):
            if i == self.mask_id:
                out.append("_")
            elif 0 <= i < len(self.alphabet):
                out.append(self.alphabet[i])
            else:
                raise InvalidInputError(f"id {int(i)} outside vocabulary")
        return "".join(out)


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: int


def split_text8(raw: str, train_ratio: float = 0.90, valid_ratio: float = 0.05):
    """Contiguous train/valid split of a character stream.

    At full scale 90M/5M characters; smaller files split proportionally
    with the same 0.90/0.05 ratios.
    """
    if not raw:
        raise InvalidInputError("empty corpus stream")
    if len(raw) < 20:
        raise InvalidInputError(f"corpus too short to split ({len(raw)} chars)")
    n_train = int(len(raw) * train_ratio)
    n_valid = int(len(raw) * valid_ratio)
    if n_train == 0 or n_valid == 0:
        raise InvalidInputError("split ratios leave an empty partition")
    return raw[:n_train], raw[n_train:n_train + n_valid]


def batches(stream, context_length: int, batch_size: int, shuffle_seed):
    """Iterate over (batch_size, context_length) token matrices.

    The stream is wrapped into non-overlapping rows of exactly
    ``context_length`` tokens (trailing remainder dropped), the rows are
    shuffled deterministically, and trailing rows that do not fill a batch
    are dropped.
    """
    if context_length < 1:
        raise InvalidInputError("context_length must be >= 1")
    if batch_size < 1:
        raise InvalidInputError("batch_size must be >= 1")
    stream = np.asarray(stream, dtype=np.int64)
    n_rows = stream.shape[0] // context_length
    rows = stream[: n_rows * context_length].reshape(n_rows, context_length)
    order = as_rng(shuffle_seed).permutation(n_rows)
    for start in range(0, n_rows - batch_size + 1, batch_size):
        yield rows[order[start:start + batch_size]]


def chunk_stream(stream, context_length: int) -> np.ndarray:
    """Wrap a token stream into rows of context_length (remainder dropped)."""
    stream = np.asarray(stream, dtype=np.int64)
    n_rows = stream.shape[0] // context_length
    return stream[: n_rows * context_length].reshape(n_rows, context_length)


def read_labeled_corpus(path, n_classes: int | None = None):
    """Read ``label<TAB>text`` lines into LabeledExample records."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                label_s, text = line.split("\t", 1)
                label = int(label_s)
            except ValueError as exc:
                raise InvalidInputError(
                    f"{path}:{lineno}: expected 'label<TAB>text'"
                ) from exc
            if label < 0 or (n_classes is not None and label >= n_classes):
                raise InvalidInputError(f"{path}:{lineno}: label {label} out of range")
            examples.append(LabeledExample(text=text, label=label))
    if not examples:
        raise InvalidInputError(f"no examples found in {path}")
    return examples


def write_labeled_corpus(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.label}\t{ex.text}\n")


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------
#
# Desk-scale stand-ins for the real datasets: a word-based sampler over the
# a-z+space alphabet whose entropy rate is low enough for a small model to
# learn, with two word families of distinct letter statistics so a sentiment
# style two-class task is linearly separable.

_WORD_LENGTHS = (2, 3, 3, 4, 4, 5, 5, 6, 7, 8)


def _make_word(rng: np.random.Generator, letters: str) -> str:
    length = int(rng.choice(_WORD_LENGTHS))
    probs = np.ones(len(letters))
    probs /= probs.sum()
    return "".join(rng.choice(list(letters), size=length, p=probs))


def _word_family(rng: np.random.Generator, letters: str, n_words: int):
    words = set()
    while len(words) < n_words:
        words.add(_make_word(rng, letters))
    words = sorted(words)
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    zipf = 1.0 / ranks
    zipf /= zipf.sum()
    order = rng.permutation(n_words)
    return [words[i] for i in order], zipf


class _WordSampler:
    """Zipf-weighted word sampler used by both synthetic generators."""

    # Class 0 skews to the first half of the alphabet, class 1 to the
    # second half, with a shared neutral pool so the classes overlap in
    # style but stay separable from letter statistics.
    def __init__(self, seed: int, n_words: int = 600):
        rng = np.random.default_rng(seed)
        self.families = [
            _word_family(rng, "abcdefghijklm", n_words),
            _word_family(rng, "nopqrstuvwxyz", n_words),
        ]
        self.neutral = _word_family(rng, "etaoinshrdlu", n_words // 3)

    def passage(self, rng: np.random.Generator, label: int, n_words: int,
                neutral_frac: float = 0.25) -> str:
        words, zipf = self.families[label]
        nwords, nzipf = self.neutral
        out = []
        for _ in range(n_words):
            if rng.random() < neutral_frac:
                out.append(nwords[rng.choice(len(nwords), p=nzipf)])
            else:
                out.append(words[rng.choice(len(words), p=zipf)])
        return " ".join(out)


def make_textlike_corpus(n_chars: int, seed: int, passage_words: int = 60) -> str:
    """Synthetic lowercase-and-space corpus of at least ``n_chars`` chars.

    Passages alternate between the two word families so a single model
    trained on this stream can express both styles.
    """
    sampler = _WordSampler(seed)
    rng = np.random.default_rng(seed + 1)
    parts = []
    total = 0
    label = 0
    while total < n_chars:
        text = sampler.passage(rng, label, passage_words)
        parts.append(text)
        total += len(text) + 1
        label = 1 - label
    return " ".join(parts)[:n_chars]


def make_sentiment_corpus(n_examples: int, seed: int, words_per_example: int = 10):
    """Two-class labeled corpus: one example per class pair, balanced."""
    sampler = _WordSampler(seed)
    rng = np.random.default_rng(seed + 2)
    examples = []
    for i in range(n_examples):
        label = i % 2
        examples.append(
            LabeledExample(text=sampler.passage(rng, label, words_per_example),
                           label=label)
        )
    return examples
