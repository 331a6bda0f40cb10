"""Offline ranking metrics with explicit tie handling.

AUC under the binarization rule (labels 0/1 negative, 2/3 positive) with
half credit for ties, Spearman's rank correlation on mid-ranks, and the
Pearson product-moment coefficient.  Degenerate inputs raise
``UndefinedMetricError`` instead of returning NaN so experiment scripts
fail loudly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["UndefinedMetricError", "EvalRecord", "auc", "spearman", "pearson", "metric_report"]


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (single class, zero variance)."""


@dataclass
class EvalRecord:
    score: float
    label: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")
        if self.label not in (0, 1, 2, 3):
            raise ValueError(f"label must be in {{0,1,2,3}}, got {self.label}")


def _arrays(records) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return scores, labels


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i: j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(records) -> float:
    """P(random positive outranks random negative), ties counted half.

    Positives are labels >= 2.  Computed from mid-ranks (the rank-sum
    form of the pairwise statistic) in O(n log n).
    """
    scores, labels = _arrays(records)
    positive = labels >= 2
    n_pos = int(positive.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs at least one positive and one negative")
    ranks = _midranks(scores)
    rank_sum = ranks[positive].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _pearson_core(x: np.ndarray, y: np.ndarray, who: str) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc)) * math.sqrt(float(yc @ yc))
    if denom == 0.0:
        raise UndefinedMetricError(f"{who} undefined: zero variance")
    return float(xc @ yc / denom)


def spearman(records) -> float:
    """Pearson correlation of score mid-ranks against label mid-ranks."""
    scores, labels = _arrays(records)
    if len(scores) < 2:
        raise UndefinedMetricError("spearman needs at least 2 records")
    return _pearson_core(_midranks(scores), _midranks(labels.astype(np.float64)), "spearman")


def pearson(records) -> float:
    """Product-moment correlation of scores against labels."""
    scores, labels = _arrays(records)
    if len(scores) < 2:
        raise UndefinedMetricError("pearson needs at least 2 records")
    return _pearson_core(scores, labels.astype(np.float64), "pearson")


def metric_report(records) -> dict:
    """Flat report object: {auc, spearman, pearson, n}."""
    return {
        "auc": auc(records),
        "spearman": spearman(records),
        "pearson": pearson(records),
        "n": len(records),
    }
