"""Tokenization, vocabulary, TF-IDF importance and keyword extraction.

Turns the multi-field text of a video (title, description, OCR, ASR) into a
single importance-ordered keyword sequence.  Each field carries a weight;
per-word TF-IDF importance is accumulated across fields, and the top-k words
(by accumulated weight, ties broken alphabetically) become the video text.

The exact tokenization rules live in docs/tokenization.md, which is the
normative reference for :func:`tokenize`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import log
from typing import Callable, Iterable

__all__ = [
    "PAD", "CLS", "SEP", "MASK", "UNK", "RESERVED_TOKENS",
    "Vocab", "TextField", "KeywordSequence", "CorpusStats",
    "tokenize", "build_corpus_stats", "importance",
    "extract_keywords", "render_keyword_text",
]

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
RESERVED_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")


class Vocab:
    """Word-level vocabulary with fixed reserved ids 0..4.

    Reserved entries are [PAD], [CLS], [SEP], [MASK], [UNK] in that order;
    everything else is bijective word <-> id.
    """

    def __init__(self, words: Iterable[str]):
        self.id_to_word: list[str] = list(RESERVED_TOKENS)
        self.word_to_id: dict[str, int] = {w: i for i, w in enumerate(RESERVED_TOKENS)}
        for w in words:
            if w in self.word_to_id:
                continue
            self.word_to_id[w] = len(self.id_to_word)
            self.id_to_word.append(w)

    def __len__(self) -> int:
        return len(self.id_to_word)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.word_to_id.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_word[i] for i in ids]

    @classmethod
    def from_docs(cls, docs) -> "Vocab":
        """Deterministic vocabulary: sorted unique words over all fields."""
        seen: set[str] = set()
        for doc in docs:
            for f in doc.fields:
                seen.update(tokenize(f.text))
        return cls(sorted(seen))


@dataclass
class TextField:
    """One raw text field of a video with its predefined weight."""

    name: str
    text: str
    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"field {self.name!r}: alpha must be >= 0, got {self.alpha}")


@dataclass
class KeywordSequence:
    """Importance-ordered keywords: words plus their non-increasing weights."""

    words: list[str]
    weights: list[float]
    k_max: int

    def __post_init__(self):
        if len(self.words) != len(self.weights):
            raise ValueError("words and weights must be parallel")
        if len(self.words) > self.k_max:
            raise ValueError(f"{len(self.words)} keywords exceed cap {self.k_max}")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate keywords")
        if any(b > a for a, b in zip(self.weights, self.weights[1:])):
            raise ValueError("weights must be non-increasing")

    def __len__(self) -> int:
        return len(self.words)


@dataclass
class CorpusStats:
    """Document counts backing the IDF term: df is per video, across fields."""

    doc_count: int
    doc_freq: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.doc_count < 1:
            raise ValueError("doc_count must be >= 1")
        for w, df in self.doc_freq.items():
            if not 1 <= df <= self.doc_count:
                raise ValueError(f"df[{w!r}]={df} outside [1, {self.doc_count}]")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace.

    Unicode letters and digits survive; every other character becomes a
    separator.  Total on any string; empty input gives an empty list.
    See docs/tokenization.md for the rule table.
    """
    out: list[str] = []
    word: list[str] = []
    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return out


def build_corpus_stats(docs) -> CorpusStats:
    """Single pass over the corpus; df counts videos containing the word."""
    df: dict[str, int] = {}
    n = 0
    for doc in docs:
        n += 1
        words = set()
        for f in doc.fields:
            words.update(tokenize(f.text))
        for w in words:
            df[w] = df.get(w, 0) + 1
    return CorpusStats(doc_count=max(n, 1), doc_freq=df)


def importance(word: str, field_tokens: list[str], stats: CorpusStats) -> float:
    """TF-IDF importance of ``word`` within one field.

    tf is within-field relative frequency; idf = ln((1+N)/(1+df)) + 1, so a
    word in every document still gets weight tf (idf floor 1) and the result
    is always strictly positive.
    """
    count = field_tokens.count(word)
    if count == 0:
        raise ValueError(f"word {word!r} does not occur in the field")
    tf = count / len(field_tokens)
    df = stats.doc_freq.get(word, 0)
    idf = log((1 + stats.doc_count) / (1 + df)) + 1.0
    return tf * idf


ImportanceFn = Callable[[str, list[str], CorpusStats], float]


def extract_keywords(
    fields: list[TextField],
    k: int,
    stats: CorpusStats,
    importance_fn: ImportanceFn = importance,
) -> KeywordSequence:
    """Accumulate field-weighted importance per word and keep the top k.

    Each distinct word of a field contributes once per field (its tf already
    reflects within-field repetition); contributions from different fields
    add up.  Descending weight, ties broken lexicographically ascending.
    All-empty fields give an empty sequence rather than an error.

    ``importance_fn`` is the pluggable scorer; TF-IDF is the default and the
    only one shipped (a named-entity scorer would slot in here).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    acc: dict[str, float] = {}
    for f in fields:
        tokens = tokenize(f.text)
        if not tokens:
            continue
        for w in dict.fromkeys(tokens):  # distinct, first-seen order
            acc[w] = acc.get(w, 0.0) + f.alpha * importance_fn(w, tokens, stats)
    ranked = sorted(acc.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return KeywordSequence(
        words=[w for w, _ in ranked],
        weights=[v for _, v in ranked],
        k_max=k,
    )


def render_keyword_text(seq: KeywordSequence) -> str:
    """Join keywords with '|'; empty sequence renders as the empty string."""
    return "|".join(seq.words)
