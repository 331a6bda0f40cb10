"""Optimizer, learning-rate schedule and the two training loops.

Both loops are deterministic given their rng: batches, masking, negative
sampling and dropout all draw from the stream the caller hands in, and no
clocks or global state are consulted.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Graph, Tensor, backward
from .model import EncodedImage, EncodedText, Model
from .sampling import (
    PretrainDoc,
    build_pqvm_batch,
    itm_negative_indices,
    mask_words,
    similarity_matrix,
    split_pseudo_query,
)
from .textproc import Vocab

__all__ = [
    "TrainingDiverged", "WarmupCosine", "AdamW",
    "run_pretrain", "run_finetune", "score_pairs",
]


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the offending step."""

    def __init__(self, step: int, values: dict):
        self.step = step
        super().__init__(f"non-finite loss at step {step}: {values}")


class WarmupCosine:
    """Linear warmup to the base rate, then cosine decay to zero."""

    def __init__(self, base_lr: float, warmup_steps: int, total_steps: int):
        self.base_lr = base_lr
        self.warmup_steps = max(0, int(warmup_steps))
        self.total_steps = max(1, int(total_steps))

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """AdamW with decoupled weight decay.

    Decay applies to matrices and embeddings (ndim >= 2) only; biases and
    layer-norm affine terms are exempt.  A parameter absent from the step's
    gradient map is treated as having zero gradient.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.02):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def _gather_rows(states: Tensor, rows: list[int]) -> Tensor:
    parts = [ad.slice_(states, (slice(i, i + 1),)) for i in rows]
    return ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]


def _gather_text(enc: EncodedText, rows: list[int]) -> EncodedText:
    return EncodedText(states=_gather_rows(enc.states, rows), cls=None,
                       mask=enc.mask[rows], ids=enc.ids[rows])


def _gather_image(enc: EncodedImage, rows: list[int]) -> EncodedImage:
    return EncodedImage(states=_gather_rows(enc.states, rows), cls=None)


def _np_softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_l2(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def _pretrain_step(model: Model, batch: list[PretrainDoc], objectives, rc, rng):
    tau = model.config.temperature
    graph = Graph()
    with graph:
        texts = [d.token_ids for d in batch]
        frames = np.stack([d.frames for d in batch])
        text_enc = model.encode_text(None, texts, train=True, rng=rng)
        img_enc = model.encode_image(frames, train=True, rng=rng)
        t_norm = model.l2_normalize(text_enc.cls)
        i_norm = model.l2_normalize(img_enc.cls)
        sim = similarity_matrix(t_norm.data, i_norm.data, tau)

        terms: dict[str, Tensor] = {}
        if "itc" in objectives:
            soft_i2t = soft_t2i = None
            if model.config.use_momentum and model.config.alpha_soft > 0:
                m_text = model.encode_text(None, texts, params=model.momentum_params)
                m_img = model.encode_image(frames, params=model.momentum_params)
                mt = _np_l2(m_text.cls.data)
                mi = _np_l2(m_img.cls.data)
                soft_i2t = _np_softmax_rows(mi @ mt.T / tau)
                soft_t2i = _np_softmax_rows(mt @ mi.T / tau)
            terms["itc"] = L.itc_loss(t_norm, i_norm, tau, soft_i2t, soft_t2i,
                                      model.config.alpha_soft)
        if "itm" in objectives:
            # same construction as build_itm_batch, but reusing the already
            # encoded text/image states of the batch (they are per-document)
            hard_text, hard_img = itm_negative_indices(sim, rng)
            n = len(batch)
            anchors = list(range(n))
            text_rows = anchors + hard_text + anchors
            img_rows = anchors + anchors + hard_img
            labels = [1] * n + [0] * (2 * n)
            fused = model.fuse(_gather_text(text_enc, text_rows),
                               _gather_image(img_enc, img_rows), train=True, rng=rng)
            terms["itm"] = L.itm_loss(model.itm_head(fused.cls), labels)
        if "mlm" in objectives:
            masked_texts, positions, target_ids = [], [], []
            for bi, doc in enumerate(batch):
                masked, targets = mask_words(doc.token_ids, None, rc.mask_ratio, rng)
                masked_texts.append(masked)
                for pos, tid in targets:
                    positions.append((bi, pos + 1))  # +1: [CLS] prefix
                    target_ids.append(tid)
            enc = model.encode_text(None, masked_texts, train=True, rng=rng)
            fused = model.fuse(enc, img_enc, train=True, rng=rng)
            logits = model.mlm_logits(fused.states, positions) if positions else None
            terms["mlm"] = L.mlm_loss(logits, target_ids).loss
        if "pqvm" in objectives:
            splits = [split_pseudo_query(d.seq, rc.split_a, rc.split_b, rng) for d in batch]
            triplets = build_pqvm_batch(batch, splits, sim, rng)
            te = model.encode_text([t.query for t in triplets],
                                   [t.text for t in triplets], train=True, rng=rng)
            # triplets come out (pos_i, neg_i) per anchor; both use image i
            img_rows = [i // 2 for i in range(len(triplets))]
            fused = model.fuse(te, _gather_image(img_enc, img_rows), train=True, rng=rng)
            terms["pqvm"] = L.pqvm_loss(model.pqvm_head(fused.cls),
                                        [t.label for t in triplets])

        if set(objectives) == set(L.PRETRAIN_OBJECTIVES):
            report = L.pretrain_loss(terms)
        else:
            report = L.LossReport.from_terms(terms)
    grads = backward(graph, report.total)
    return report, grads


def run_pretrain(model: Model, docs: list[PretrainDoc], objectives, rc,
                 rng: np.random.Generator, on_step=None) -> list[dict]:
    """Train on the active objectives; returns one log row per step."""
    objectives = tuple(objectives)
    if not objectives:
        raise ValueError("no active pre-training objectives")
    unknown = set(objectives) - set(L.PRETRAIN_OBJECTIVES)
    if unknown:
        raise ValueError(f"unknown objectives {sorted(unknown)}")
    pool = [d for d in docs if d.token_ids]
    if "pqvm" in objectives:
        pool = [d for d in pool if len(d.token_ids) >= rc.split_b + 1]
    if len(pool) < 2:
        raise ValueError("fewer than 2 usable documents after filtering")
    batch_size = min(rc.batch_size, len(pool))
    if model.config.use_momentum and model.momentum_params is None:
        model.init_momentum()
    opt = AdamW(model.params, beta1=rc.adam_beta1, beta2=rc.adam_beta2,
                weight_decay=rc.weight_decay)
    sched = WarmupCosine(rc.pretrain_lr, rc.warmup_steps, rc.pretrain_steps)
    rows = []
    for step in range(rc.pretrain_steps):
        idx = rng.choice(len(pool), size=batch_size, replace=False)
        report, grads = _pretrain_step(model, [pool[i] for i in idx], objectives, rc, rng)
        values = report.values()
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDiverged(step, values)
        opt.step(grads, sched(step))
        if model.config.use_momentum:
            model.momentum_step()
        rows.append({"step": step, **values})
        if on_step is not None:
            on_step(step, model)
    return rows


FINETUNE_LOSSES = ("hier_softmax", "bce", "mse", "ordinal")


def _finetune_step(model: Model, batch, docs_by_id, vocab: Vocab, rc, rng, loss_kind):
    graph = Graph()
    with graph:
        queries = [vocab.encode(p.query) for p in batch]
        texts = [docs_by_id[p.video_id].token_ids for p in batch]
        frames = np.stack([docs_by_id[p.video_id].frames for p in batch])
        te = model.encode_text(queries, texts, train=True, rng=rng)
        ie = model.encode_image(frames, train=True, rng=rng)
        z = model.fuse(te, ie, train=True, rng=rng).cls
        labels = [p.label for p in batch]
        extra = {}
        if loss_kind == "hier_softmax":
            out = L.RelevanceOutput.from_sigmoids(*model.relevance_head(z))
            loss = L.qvm_loss(out, labels, rc.lambda_reg)
            extra["mean_r"] = float(out.r.data.mean())
        elif loss_kind == "bce":
            loss = L.bce_loss(model.bce_score(z), L.binarize_labels(labels))
        elif loss_kind == "mse":
            loss = L.mse_loss(model.mse_score(z), labels)
        elif loss_kind == "ordinal":
            loss = L.ordinal_regression_loss(model.ordinal_sigmoids(z), labels)
        else:
            raise ValueError(f"unknown finetune loss {loss_kind!r}")
    grads = backward(graph, loss)
    return loss, grads, extra


def run_finetune(model: Model, pairs, docs_by_id, vocab: Vocab, rc,
                 rng: np.random.Generator, on_step=None) -> list[dict]:
    """Fine-tune with the configured relevance loss; one log row per step."""
    if rc.finetune_loss not in FINETUNE_LOSSES:
        raise ValueError(f"finetune_loss must be one of {FINETUNE_LOSSES}")
    if not pairs:
        raise ValueError("no labeled pairs to fine-tune on")
    missing = {p.video_id for p in pairs} - set(docs_by_id)
    if missing:
        raise ValueError(f"pairs reference unknown videos, e.g. {sorted(missing)[0]!r}")
    batch_size = min(rc.batch_size, len(pairs))
    steps_per_epoch = math.ceil(len(pairs) / batch_size)
    total_steps = rc.finetune_epochs * steps_per_epoch
    opt = AdamW(model.params, beta1=rc.adam_beta1, beta2=rc.adam_beta2,
                weight_decay=rc.weight_decay)
    sched = WarmupCosine(rc.finetune_lr, rc.warmup_steps, total_steps)
    rows = []
    step = 0
    for _ in range(rc.finetune_epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), batch_size):
            batch = [pairs[i] for i in order[start: start + batch_size]]
            loss, grads, extra = _finetune_step(
                model, batch, docs_by_id, vocab, rc, rng, rc.finetune_loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(step, {rc.finetune_loss: value})
            opt.step(grads, sched(step))
            rows.append({"step": step, rc.finetune_loss: value, **extra})
            if on_step is not None:
                on_step(step, model)
            step += 1
    return rows


def score_pairs(model: Model, pairs, docs_by_id, vocab: Vocab,
                head: str = "hier_softmax", batch_size: int = 64) -> np.ndarray:
    """Deterministic relevance scores for (query, video) pairs, no gradients."""
    if head not in FINETUNE_LOSSES:
        raise ValueError(f"head must be one of {FINETUNE_LOSSES}")
    scores = []
    for start in range(0, len(pairs), batch_size):
        batch = pairs[start: start + batch_size]
        queries = [vocab.encode(p.query) for p in batch]
        texts = [docs_by_id[p.video_id].token_ids for p in batch]
        frames = np.stack([docs_by_id[p.video_id].frames for p in batch])
        te = model.encode_text(queries, texts)
        ie = model.encode_image(frames)
        z = model.fuse(te, ie).cls
        if head == "hier_softmax":
            out = L.RelevanceOutput.from_sigmoids(*model.relevance_head(z))
            scores.append(out.r.data.reshape(-1))
        elif head == "bce":
            scores.append(model.bce_score(z).data.reshape(-1))
        elif head == "mse":
            scores.append(model.mse_score(z).data.reshape(-1))
        else:
            scores.append(L.ordinal_score(model.ordinal_sigmoids(z)).data.reshape(-1))
    return np.concatenate(scores) if scores else np.zeros(0)
