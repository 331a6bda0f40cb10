"""Training batch construction.

Pseudo-query splitting of keyword sequences, hard-negative mining off the
batch similarity matrix (for both the matching task over plain text-image
pairs and the one over query-text-image triplets), and word-level masking
for the masked-prediction objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .textproc import MASK, KeywordSequence, Vocab

__all__ = [
    "MAX_QUERY_TOKENS", "MAX_TEXT_TOKENS",
    "SkipSample", "PseudoQuerySplit", "SimilarityMatrix", "TripletSample",
    "PretrainDoc", "prepare_pretrain_docs",
    "split_pseudo_query", "similarity_matrix", "sample_hard_negative",
    "itm_negative_indices", "build_pqvm_batch", "build_itm_batch", "mask_words",
]

MAX_QUERY_TOKENS = 16
MAX_TEXT_TOKENS = 64


class SkipSample(Exception):
    """Sample cannot be built; the caller drops the document from the batch."""


@dataclass
class PseudoQuerySplit:
    """An order-preserving cut of a keyword sequence at index ``inx``."""

    inx: int
    pseudo_query: list[str]
    remaining_text: list[str]
    a: int
    b: int


@dataclass
class SimilarityMatrix:
    """Row-stochastic batch similarity: average of the two softmax views."""

    s: np.ndarray
    n: int

    def row(self, i: int) -> np.ndarray:
        return self.s[i]


@dataclass
class TripletSample:
    """(query tokens, text tokens, frames, 0/1 flag or ordinal label).

    Token lists are truncated to the query/text caps at construction;
    overlength never errors.
    """

    query: list[int]
    text: list[int]
    frames: np.ndarray
    label: int

    def __post_init__(self):
        self.query = list(self.query)[:MAX_QUERY_TOKENS]
        self.text = list(self.text)[:MAX_TEXT_TOKENS]


@dataclass
class PretrainDoc:
    """A corpus document prepared for batching: keywords already tokenized."""

    doc_id: str
    seq: KeywordSequence
    token_ids: list[int]
    frames: np.ndarray

    @property
    def words(self) -> list[str]:
        return self.seq.words


def prepare_pretrain_docs(
    docs, keywords: dict[str, KeywordSequence], vocab: Vocab
) -> list[PretrainDoc]:
    return [
        PretrainDoc(
            doc_id=doc.id,
            seq=keywords[doc.id],
            token_ids=vocab.encode(keywords[doc.id].words),
            frames=doc.frames,
        )
        for doc in docs
    ]


def split_pseudo_query(
    seq: KeywordSequence, a: int, b: int, rng: np.random.Generator
) -> PseudoQuerySplit:
    """Cut at a uniform index in [a, b]; the head becomes the pseudo-query.

    Requires len(seq) >= b + 1 so the remaining text is never empty;
    shorter sequences raise SkipSample so the caller can drop the document.
    """
    if not 1 <= a <= b:
        raise ValueError(f"need 1 <= a <= b, got a={a}, b={b}")
    if len(seq) < b + 1:
        raise SkipSample(f"sequence of {len(seq)} keywords cannot be split with b={b}")
    inx = int(rng.integers(a, b + 1))
    return PseudoQuerySplit(
        inx=inx,
        pseudo_query=list(seq.words[:inx]),
        remaining_text=list(seq.words[inx:]),
        a=a,
        b=b,
    )


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def similarity_matrix(
    text_cls: np.ndarray, img_cls: np.ndarray, temperature: float
) -> SimilarityMatrix:
    """Average of the row-softmaxed image-to-text and text-to-image views.

    Inputs are the L2-normalized [CLS] embeddings of a batch, one row per
    document; rows of the result sum to 1.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t = np.asarray(text_cls, dtype=np.float64)
    v = np.asarray(img_cls, dtype=np.float64)
    if t.shape != v.shape or t.ndim != 2:
        raise ValueError(f"embedding shapes differ or are not 2-D: {t.shape} vs {v.shape}")
    for name, arr in (("text", t), ("image", v)):
        norms = np.linalg.norm(arr, axis=1)
        if np.any(norms == 0.0):
            raise ValueError(f"zero-norm {name} embedding row at index {int(np.argmin(norms))}")
    i2t = _softmax_rows(v @ t.T / temperature)
    t2i = _softmax_rows(t @ v.T / temperature)
    return SimilarityMatrix(s=0.5 * (i2t + t2i), n=t.shape[0])


def _rows(S) -> np.ndarray:
    return S.s if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)


def sample_hard_negative(S, i: int, rng: np.random.Generator, size: int | None = None):
    """Draw x != i from row i with the diagonal zeroed and renormalized.

    ``size=None`` returns a single int; an integer ``size`` returns that many
    iid draws as an array (same distribution, used by frequency tests).
    """
    s = _rows(S)
    n = s.shape[0]
    if n < 2:
        raise ValueError("hard-negative sampling needs a batch of at least 2")
    row = s[i].copy()
    row[i] = 0.0
    total = row.sum()
    if total <= 0.0:
        raise ValueError(f"row {i} has no off-diagonal mass")
    row /= total
    if size is None:
        return int(rng.choice(n, p=row))
    return rng.choice(n, size=size, p=row)


def itm_negative_indices(
    S, rng: np.random.Generator
) -> tuple[list[int], list[int]]:
    """Per anchor: one hard text index (for its image) and one hard image
    index (for its text), both drawn from the anchor's similarity row."""
    n = _rows(S).shape[0]
    hard_text = [sample_hard_negative(S, i, rng) for i in range(n)]
    hard_img = [sample_hard_negative(S, i, rng) for i in range(n)]
    return hard_text, hard_img


def build_pqvm_batch(
    docs: list[PretrainDoc],
    splits: list[PseudoQuerySplit],
    S,
    rng: np.random.Generator,
) -> list[TripletSample]:
    """Positive and hard-negative query/text/image triplets, 2N in total.

    Emitted in order (pos_0, neg_0, pos_1, neg_1, ...).  pos_i pairs doc i's
    pseudo-query with its own remaining text and frames; neg_i swaps in the
    pseudo-query of a similarity-sampled x != i.  The text side is always
    the remaining portion only, so a triplet's own pseudo-query words never
    appear in its text tokens.
    """
    n = len(docs)
    if n < 2:
        raise ValueError("pqvm batch needs at least 2 documents")
    if len(splits) != n:
        raise ValueError(f"{len(splits)} splits for {n} documents")
    out: list[TripletSample] = []
    for i, (doc, split) in enumerate(zip(docs, splits)):
        query = doc.token_ids[: split.inx]
        remaining = doc.token_ids[split.inx:]
        out.append(TripletSample(query=query, text=remaining, frames=doc.frames, label=1))
        x = sample_hard_negative(S, i, rng)
        neg_query = docs[x].token_ids[: splits[x].inx]
        out.append(TripletSample(query=neg_query, text=remaining, frames=doc.frames, label=0))
    return out


def build_itm_batch(
    docs: list[PretrainDoc], S, rng: np.random.Generator
) -> list[TripletSample]:
    """Aligned positives plus 2N hard negatives (no query side).

    Emitted as N positives, then N (hard text, own image) negatives, then
    N (own text, hard image) negatives.
    """
    n = len(docs)
    if n < 2:
        raise ValueError("itm batch needs at least 2 documents")
    hard_text, hard_img = itm_negative_indices(S, rng)
    out = [TripletSample(query=[], text=d.token_ids, frames=d.frames, label=1) for d in docs]
    out += [
        TripletSample(query=[], text=docs[j].token_ids, frames=docs[i].frames, label=0)
        for i, j in enumerate(hard_text)
    ]
    out += [
        TripletSample(query=[], text=docs[i].token_ids, frames=docs[k].frames, label=0)
        for i, k in enumerate(hard_img)
    ]
    return out


def mask_words(
    tokens: list[int],
    word_spans: list[tuple[int, int]] | None,
    ratio: float,
    rng: np.random.Generator,
) -> tuple[list[int], list[tuple[int, int]]]:
    """Whole-word masking: each word is selected independently with
    probability ``ratio`` and every position inside it becomes [MASK].

    With a word-level vocabulary each token is its own word, which is the
    default when ``word_spans`` is None.  Returns the masked token list and
    (position, original id) targets.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    if word_spans is None:
        word_spans = [(i, i + 1) for i in range(len(tokens))]
    masked = list(tokens)
    targets: list[tuple[int, int]] = []
    for start, end in word_spans:
        if rng.random() >= ratio:
            continue
        for pos in range(start, end):
            targets.append((pos, tokens[pos]))
            masked[pos] = MASK
    return masked, targets
