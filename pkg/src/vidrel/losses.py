"""Training objectives.

Pre-training: symmetric contrastive alignment (itc), two-class matching for
text-image pairs (itm) and query-text-image triplets (pqvm), masked-word
prediction (mlm), and their unweighted sum.  Fine-tuning: the two-level
hierarchical-softmax ordinal loss with a squared-error score regularizer,
plus the binary cross-entropy / mean-squared-error / cumulative ordinal
regression baselines.

All losses take autodiff Tensors and return a scalar Tensor whose gradient
is verified against ``finite_difference_check``; log arguments are clamped
(see autodiff.LOG_CLAMP) so every loss is finite on valid inputs.
``label_probs`` / ``relevance_score`` also accept plain numpy arrays for the
no-gradient scoring path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "itc_loss", "itm_loss", "pqvm_loss", "MLMLossResult", "mlm_loss",
    "LossReport", "pretrain_loss", "PRETRAIN_OBJECTIVES",
    "label_probs", "relevance_score", "RelevanceOutput", "qvm_loss",
    "binarize_labels", "bce_loss", "mse_loss",
    "ordinal_targets", "ordinal_regression_loss", "ordinal_score",
]

PRETRAIN_OBJECTIVES = ("itc", "itm", "mlm", "pqvm")


def _check_labels(labels, allowed, who: str) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.size and not np.isin(arr, allowed).all():
        bad = arr[~np.isin(arr, allowed)][0]
        raise ValueError(f"{who}: label {bad!r} outside {sorted(allowed)}")
    return arr.astype(np.int64)


def _mean_ce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-softmaxed logits against target rows."""
    n = logits.shape[0]
    logp = ad.log(ad.softmax(logits, axis=-1))
    return ad.scale(ad.reduce_sum(ad.mul(logp, ad.constant(targets))), -1.0 / n)


def itc_loss(
    text_cls: Tensor,
    img_cls: Tensor,
    temperature: float,
    soft_i2t: np.ndarray | None = None,
    soft_t2i: np.ndarray | None = None,
    alpha_soft: float = 0.0,
) -> Tensor:
    """Symmetric InfoNCE over L2-normalized batch embeddings.

    With soft targets (the momentum path) the per-row target becomes
    (1 - alpha_soft) * onehot + alpha_soft * soft row.
    """
    n = text_cls.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if text_cls.shape != img_cls.shape:
        raise ad.ShapeError(f"itc: shapes differ {text_cls.shape} vs {img_cls.shape}")
    eye = np.eye(n)

    def targets(soft):
        if soft is None or alpha_soft == 0.0:
            return eye
        return (1.0 - alpha_soft) * eye + alpha_soft * np.asarray(soft)

    logits_i2t = ad.scale(ad.matmul(img_cls, ad.transpose(text_cls)), 1.0 / temperature)
    logits_t2i = ad.scale(ad.matmul(text_cls, ad.transpose(img_cls)), 1.0 / temperature)
    loss_i2t = _mean_ce(logits_i2t, targets(soft_i2t))
    loss_t2i = _mean_ce(logits_t2i, targets(soft_t2i))
    return ad.scale(ad.add(loss_i2t, loss_t2i), 0.5)


def _two_class_ce(logits: Tensor, labels, who: str) -> Tensor:
    arr = _check_labels(labels, (0, 1), who)
    if logits.shape != (arr.size, 2):
        raise ad.ShapeError(f"{who}: logits {logits.shape} for {arr.size} labels")
    onehot = np.zeros((arr.size, 2))
    onehot[np.arange(arr.size), arr] = 1.0
    return _mean_ce(logits, onehot)


def itm_loss(logits: Tensor, labels) -> Tensor:
    """Mean two-class cross-entropy for text-image match logits."""
    return _two_class_ce(logits, labels, "itm_loss")


def pqvm_loss(logits: Tensor, labels) -> Tensor:
    """Mean two-class cross-entropy for query-text-image match logits."""
    return _two_class_ce(logits, labels, "pqvm_loss")


class MLMLossResult(NamedTuple):
    loss: Tensor
    num_targets: int

    @property
    def empty(self) -> bool:
        # flag for batches that had nothing masked; they contribute 0
        return self.num_targets == 0


def mlm_loss(logits: Tensor | None, target_ids) -> MLMLossResult:
    """Mean cross-entropy over masked positions only.

    ``logits`` holds one vocabulary row per masked position, parallel to
    ``target_ids``.  Zero masked positions yield loss 0 with the empty flag.
    """
    ids = np.asarray(target_ids, dtype=np.int64)
    if ids.size == 0:
        return MLMLossResult(loss=ad.constant(0.0), num_targets=0)
    if logits is None or logits.shape[0] != ids.size:
        got = None if logits is None else logits.shape
        raise ad.ShapeError(f"mlm_loss: logits {got} for {ids.size} targets")
    vocab = logits.shape[-1]
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValueError(f"mlm_loss: target id outside [0, {vocab})")
    onehot = np.zeros((ids.size, vocab))
    onehot[np.arange(ids.size), ids] = 1.0
    return MLMLossResult(loss=_mean_ce(logits, onehot), num_targets=int(ids.size))


@dataclass
class LossReport:
    """Named scalar per active objective; total is their sum."""

    terms: dict[str, Tensor]
    total: Tensor

    def values(self) -> dict[str, float]:
        out = {name: float(t.data) for name, t in self.terms.items()}
        out["total"] = float(self.total.data)
        return out

    @classmethod
    def from_terms(cls, terms: dict[str, Tensor]) -> "LossReport":
        if not terms:
            raise ValueError("no loss terms")
        total = None
        for t in terms.values():
            total = t if total is None else ad.add(total, t)
        return cls(terms=dict(terms), total=total)


def pretrain_loss(terms: dict[str, Tensor]) -> LossReport:
    """Unweighted sum of the four pre-training objectives; all must be present."""
    missing = [k for k in PRETRAIN_OBJECTIVES if k not in terms]
    if missing:
        raise ValueError(f"pretrain_loss: missing components {missing}")
    return LossReport.from_terms({k: terms[k] for k in PRETRAIN_OBJECTIVES})


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _one_minus(x: Tensor) -> Tensor:
    return ad.add(ad.scale(x, -1.0), ad.constant(np.ones(x.shape)))


def label_probs(p_pos, p_le, p_ex):
    """Four-label probabilities from the three binary heads.

    p0 = (1-p_pos)(1-p_le), p1 = (1-p_pos)p_le, p2 = p_pos(1-p_ex),
    p3 = p_pos*p_ex; they sum to 1 by construction.  Accepts Tensors
    (differentiable) or numpy arrays/floats (plain arithmetic).
    """
    if _is_tensor(p_pos):
        not_pos, not_le, not_ex = _one_minus(p_pos), _one_minus(p_le), _one_minus(p_ex)
        return (
            ad.mul(not_pos, not_le),
            ad.mul(not_pos, p_le),
            ad.mul(p_pos, not_ex),
            ad.mul(p_pos, p_ex),
        )
    p_pos, p_le, p_ex = (np.asarray(v, dtype=np.float64) for v in (p_pos, p_le, p_ex))
    return (
        (1.0 - p_pos) * (1.0 - p_le),
        (1.0 - p_pos) * p_le,
        p_pos * (1.0 - p_ex),
        p_pos * p_ex,
    )


def relevance_score(p0, p1, p2, p3):
    """Expected label: r = p1 + 2*p2 + 3*p3, in [0, 3]."""
    if _is_tensor(p1):
        return ad.add(ad.add(p1, ad.scale(p2, 2.0)), ad.scale(p3, 3.0))
    return np.asarray(p1) + 2.0 * np.asarray(p2) + 3.0 * np.asarray(p3)


@dataclass
class RelevanceOutput:
    """Everything the ordinal head produces for a batch."""

    p_pos: object
    p_le: object
    p_ex: object
    p0: object
    p1: object
    p2: object
    p3: object
    r: object

    @classmethod
    def from_sigmoids(cls, p_pos, p_le, p_ex) -> "RelevanceOutput":
        p0, p1, p2, p3 = label_probs(p_pos, p_le, p_ex)
        return cls(p_pos=p_pos, p_le=p_le, p_ex=p_ex,
                   p0=p0, p1=p1, p2=p2, p3=p3,
                   r=relevance_score(p0, p1, p2, p3))


def qvm_loss(out: RelevanceOutput, labels, lambda_reg: float = 1.0) -> Tensor:
    """Hierarchical-softmax NLL plus lambda_reg * mean squared (r - l).

    The regression term is *added*: subtracting it (as a literal reading of
    the printed objective would) rewards large score errors.  ``lambda_reg``
    may be set negative to reproduce that behaviour for comparison runs.
    """
    arr = _check_labels(labels, (0, 1, 2, 3), "qvm_loss")
    n = arr.size
    probs = ad.concat([out.p0, out.p1, out.p2, out.p3], axis=1)  # (B, 4)
    if probs.shape != (n, 4):
        raise ad.ShapeError(f"qvm_loss: head outputs {probs.shape} for {n} labels")
    onehot = np.zeros((n, 4))
    onehot[np.arange(n), arr] = 1.0
    p_l = ad.reduce_sum(ad.mul(probs, ad.constant(onehot)), axis=1)
    nll = ad.scale(ad.reduce_sum(ad.log(p_l)), -1.0 / n)
    diff = ad.add(out.r, ad.constant(-arr.reshape(out.r.shape).astype(np.float64)))
    reg = ad.scale(ad.reduce_mean(ad.mul(diff, diff)), lambda_reg)
    return ad.add(nll, reg)


def binarize_labels(labels) -> np.ndarray:
    """Ordinal {0,1,2,3} -> binary: {0,1} -> 0, {2,3} -> 1."""
    arr = _check_labels(labels, (0, 1, 2, 3), "binarize_labels")
    return (arr >= 2).astype(np.int64)


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy on sigmoid scores against {0,1} labels."""
    arr = _check_labels(labels, (0, 1), "bce_loss").astype(np.float64)
    y = ad.constant(arr.reshape(probs.shape))
    ones = ad.constant(np.ones(probs.shape))
    terms = ad.add(ad.mul(y, ad.log(probs)),
                   ad.mul(ad.add(ones, ad.scale(y, -1.0)), ad.log(_one_minus(probs))))
    return ad.scale(ad.reduce_mean(terms), -1.0)


def mse_loss(scores: Tensor, labels) -> Tensor:
    """Mean squared error of raw scores against ordinal labels."""
    arr = _check_labels(labels, (0, 1, 2, 3), "mse_loss").astype(np.float64)
    diff = ad.add(scores, ad.constant(-arr.reshape(scores.shape)))
    return ad.reduce_mean(ad.mul(diff, diff))


def ordinal_targets(labels) -> np.ndarray:
    """Cumulative targets: column k of the result is 1[label > k], k = 0..2."""
    arr = _check_labels(labels, (0, 1, 2, 3), "ordinal_targets")
    return (arr[:, None] > np.arange(3)[None, :]).astype(np.float64)


def ordinal_regression_loss(sigmoids: Tensor, labels) -> Tensor:
    """Sum over the three cumulative classifiers of their BCE, batch-averaged."""
    t = ordinal_targets(labels)
    if sigmoids.shape != t.shape:
        raise ad.ShapeError(f"ordinal loss: sigmoids {sigmoids.shape} for targets {t.shape}")
    y = ad.constant(t)
    ones = ad.constant(np.ones(t.shape))
    terms = ad.add(ad.mul(y, ad.log(sigmoids)),
                   ad.mul(ad.add(ones, ad.scale(y, -1.0)), ad.log(_one_minus(sigmoids))))
    return ad.scale(ad.reduce_sum(terms), -1.0 / t.shape[0])


def ordinal_score(sigmoids):
    """Ranking score of the cumulative construction: sum of the sigmoids, in [0, 3]."""
    if _is_tensor(sigmoids):
        return ad.reduce_sum(sigmoids, axis=1)
    return np.asarray(sigmoids).sum(axis=1)
