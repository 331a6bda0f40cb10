"""Toy-scale dual-stream relevance model.

A text encoder over [CLS] query [SEP] text token sequences, a vision encoder
over chronologically concatenated frame patches, a fusion encoder that
cross-attends from text onto image states, a momentum copy of the unimodal
encoders, and the output heads (two-class match heads, masked-word head, and
the ordinal relevance head with its baselines).

The geometry mirrors the usual BERT/ViT block structure at a fraction of the
size; all parameters are randomly initialized.  Parameter count follows the
analytic formula in docs/model.md, and checkpoints use the binary layout
documented there (save/load roundtrips are bit-exact).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .textproc import CLS, SEP

__all__ = [
    "ModelConfig", "EncodedText", "EncodedImage", "FusionOutput",
    "RelevanceHeadParams", "relevance_head", "two_class_head",
    "momentum_update", "Model", "CheckpointError",
]

CHECKPOINT_MAGIC = b"VRELCKP1"
NEG_INF = -1e9


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the model."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    text_layers: int = 2
    vision_layers: int = 2
    fusion_layers: int = 2
    max_text_len: int = 64
    max_query_len: int = 16
    patch_size: int = 8
    max_patches: int = 48
    frame_h: int = 16
    frame_w: int = 16
    frames_per_video: int = 3
    temperature: float = 0.07
    momentum: float = 0.995
    alpha_soft: float = 0.0
    use_momentum: bool = False
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if not 0.0 <= self.alpha_soft <= 1.0:
            raise ValueError("alpha_soft must be in [0, 1]")
        if self.frame_h % self.patch_size or self.frame_w % self.patch_size:
            raise ValueError(
                f"frame {self.frame_h}x{self.frame_w} not divisible by patch {self.patch_size}"
            )
        if self.total_patches > self.max_patches:
            raise ValueError(
                f"{self.total_patches} patches exceed max_patches {self.max_patches}"
            )

    @property
    def patches_per_frame(self) -> int:
        return (self.frame_h // self.patch_size) * (self.frame_w // self.patch_size)

    @property
    def total_patches(self) -> int:
        return self.patches_per_frame * self.frames_per_video

    @property
    def ffn_dim(self) -> int:
        return 4 * self.d_model

    @property
    def text_positions(self) -> int:
        # [CLS] + query + [SEP] + text
        return self.max_query_len + self.max_text_len + 2


@dataclass
class EncodedText:
    states: Tensor  # (B, L, d)
    cls: Tensor  # (B, d)
    mask: np.ndarray  # (B, L) 1.0 for real tokens
    ids: np.ndarray  # (B, L)


@dataclass
class EncodedImage:
    states: Tensor  # (B, K+1, d)
    cls: Tensor  # (B, d)


@dataclass
class FusionOutput:
    states: Tensor  # (B, L, d), same length as the text input
    cls: Tensor  # (B, d)


@dataclass
class RelevanceHeadParams:
    """Three independent scalar projections: positive / less / excellent."""

    w_pos: Tensor
    b_pos: Tensor
    w_le: Tensor
    b_le: Tensor
    w_ex: Tensor
    b_ex: Tensor


def relevance_head(z_cls: Tensor, params: RelevanceHeadParams):
    """Three sigmoid outputs of shape (B, 1), one per binary question."""
    p_pos = ad.sigmoid(ad.add(ad.matmul(z_cls, params.w_pos), params.b_pos))
    p_le = ad.sigmoid(ad.add(ad.matmul(z_cls, params.w_le), params.b_le))
    p_ex = ad.sigmoid(ad.add(ad.matmul(z_cls, params.w_ex), params.b_ex))
    return p_pos, p_le, p_ex


def two_class_head(z_cls: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Single affine map to 2 logits."""
    return ad.add(ad.matmul(z_cls, w), b)


def momentum_update(online: dict[str, Tensor], ema: dict[str, Tensor], m: float) -> None:
    """ema <- m * ema + (1 - m) * online, elementwise and in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    if online.keys() != ema.keys():
        raise ValueError("online and ema parameter sets name different tensors")
    for name, p in online.items():
        q = ema[name]
        if q.data.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: {q.data.shape} vs {p.data.shape}")
        q.data *= m
        q.data += (1.0 - m) * p.data


class Model:
    """Holds named parameters and runs the forward passes.

    All forwards are deterministic given parameters and inputs; dropout only
    engages when ``train=True`` and an rng is supplied.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.momentum_params: dict[str, Tensor] | None = None
        self._init_params(rng)
        if config.use_momentum:
            self.init_momentum()

    # -- parameters ---------------------------------------------------------

    def _weight(self, rng, name: str, shape) -> None:
        self.params[name] = ad.parameter(rng.normal(0.0, self.config.init_std, size=shape))

    def _zeros(self, name: str, shape) -> None:
        self.params[name] = ad.parameter(np.zeros(shape))

    def _ones(self, name: str, shape) -> None:
        self.params[name] = ad.parameter(np.ones(shape))

    def _block(self, rng, prefix: str, cross: bool) -> None:
        d, f = self.config.d_model, self.config.ffn_dim
        for part in ("attn",) + (("xattn",) if cross else ()):
            for w in ("wq", "wk", "wv", "wo"):
                self._weight(rng, f"{prefix}.{part}.{w}", (d, d))
            for b in ("bq", "bk", "bv", "bo"):
                self._zeros(f"{prefix}.{part}.{b}", (d,))
        self._ones(f"{prefix}.ln1.g", (d,))
        self._zeros(f"{prefix}.ln1.b", (d,))
        if cross:
            self._ones(f"{prefix}.lnx.g", (d,))
            self._zeros(f"{prefix}.lnx.b", (d,))
        self._weight(rng, f"{prefix}.ffn.w1", (d, f))
        self._zeros(f"{prefix}.ffn.b1", (f,))
        self._weight(rng, f"{prefix}.ffn.w2", (f, d))
        self._zeros(f"{prefix}.ffn.b2", (d,))
        self._ones(f"{prefix}.ln2.g", (d,))
        self._zeros(f"{prefix}.ln2.b", (d,))

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        d = c.d_model
        self._weight(rng, "text.tok_emb", (c.vocab_size, d))
        self._weight(rng, "text.pos_emb", (c.text_positions, d))
        self._ones("text.emb_ln.g", (d,))
        self._zeros("text.emb_ln.b", (d,))
        for i in range(c.text_layers):
            self._block(rng, f"text.l{i}", cross=False)
        self._weight(rng, "vision.patch.w", (c.patch_size * c.patch_size, d))
        self._zeros("vision.patch.b", (d,))
        self._weight(rng, "vision.cls", (1, d))
        self._weight(rng, "vision.pos_emb", (1 + c.max_patches, d))
        self._ones("vision.emb_ln.g", (d,))
        self._zeros("vision.emb_ln.b", (d,))
        for i in range(c.vision_layers):
            self._block(rng, f"vision.l{i}", cross=False)
        for i in range(c.fusion_layers):
            self._block(rng, f"fusion.l{i}", cross=True)
        self._weight(rng, "head.itm.w", (d, 2))
        self._zeros("head.itm.b", (2,))
        self._weight(rng, "head.pqvm.w", (d, 2))
        self._zeros("head.pqvm.b", (2,))
        self._weight(rng, "head.mlm.w", (d, c.vocab_size))
        self._zeros("head.mlm.b", (c.vocab_size,))
        for h in ("pos", "le", "ex"):
            self._weight(rng, f"head.rel.{h}.w", (d, 1))
            self._zeros(f"head.rel.{h}.b", (1,))
        self._weight(rng, "head.bce.w", (d, 1))
        self._zeros("head.bce.b", (1,))
        self._weight(rng, "head.mse.w", (d, 1))
        self._zeros("head.mse.b", (1,))
        self._weight(rng, "head.ord.w", (d, 3))
        self._zeros("head.ord.b", (3,))

    def num_parameters(self) -> int:
        """Trainable parameter count; momentum buffers are not included."""
        return sum(p.size for p in self.params.values())

    def unimodal_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(("text.", "vision."))]

    def init_momentum(self) -> None:
        self.momentum_params = {
            n: Tensor(self.params[n].data.copy()) for n in self.unimodal_param_names()
        }

    def momentum_step(self) -> None:
        if self.momentum_params is None:
            raise ValueError("momentum copy was never initialized")
        online = {n: self.params[n] for n in self.momentum_params}
        momentum_update(online, self.momentum_params, self.config.momentum)

    # -- shared transformer machinery ---------------------------------------

    def _dropout(self, x: Tensor, train: bool, rng) -> Tensor:
        p = self.config.dropout
        if not train or rng is None or p <= 0.0:
            return x
        keep = (rng.random(x.shape) >= p) / (1.0 - p)
        return ad.mul(x, ad.constant(keep))

    def _attention(self, prefix, part, q_states, kv_states, attn_mask, params, train, rng):
        p = params
        d = self.config.d_model
        nh = self.config.n_heads
        dh = d // nh
        q = ad.add(ad.matmul(q_states, p[f"{prefix}.{part}.wq"]), p[f"{prefix}.{part}.bq"])
        k = ad.add(ad.matmul(kv_states, p[f"{prefix}.{part}.wk"]), p[f"{prefix}.{part}.bk"])
        v = ad.add(ad.matmul(kv_states, p[f"{prefix}.{part}.wv"]), p[f"{prefix}.{part}.bv"])
        heads = []
        for h in range(nh):
            cols = (slice(None), slice(None), slice(h * dh, (h + 1) * dh))
            qh, kh, vh = ad.slice_(q, cols), ad.slice_(k, cols), ad.slice_(v, cols)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
            if attn_mask is not None:
                scores = ad.add(scores, attn_mask)
            probs = self._dropout(ad.softmax(scores, axis=-1), train, rng)
            heads.append(ad.matmul(probs, vh))
        ctx = ad.concat(heads, axis=2)
        out = ad.add(ad.matmul(ctx, p[f"{prefix}.{part}.wo"]), p[f"{prefix}.{part}.bo"])
        return self._dropout(out, train, rng)

    def _layer(self, prefix, x, attn_mask, params, train, rng, cross_states=None):
        p = params
        out = self._attention(prefix, "attn", x, x, attn_mask, p, train, rng)
        x = ad.layer_norm(ad.add(x, out), p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        if cross_states is not None:
            out = self._attention(prefix, "xattn", x, cross_states, None, p, train, rng)
            x = ad.layer_norm(ad.add(x, out), p[f"{prefix}.lnx.g"], p[f"{prefix}.lnx.b"])
        h = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.ffn.w1"]), p[f"{prefix}.ffn.b1"]))
        h = self._dropout(h, train, rng)
        out = ad.add(ad.matmul(h, p[f"{prefix}.ffn.w2"]), p[f"{prefix}.ffn.b2"])
        return ad.layer_norm(ad.add(x, out), p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])

    @staticmethod
    def _additive_mask(mask: np.ndarray) -> Tensor:
        # (B, L) keep-mask -> (B, L, L) additive bias over key positions
        bias = np.where(mask[:, None, :] > 0, 0.0, NEG_INF)
        return ad.constant(np.ascontiguousarray(np.broadcast_to(bias, (mask.shape[0], mask.shape[1], mask.shape[1]))))

    @staticmethod
    def _cls_of(states: Tensor) -> Tensor:
        return ad.slice_(states, (slice(None), 0, slice(None)))

    # -- encoders ------------------------------------------------------------

    @staticmethod
    def _as_batch(tokens) -> list[list[int]]:
        if tokens is None:
            return []
        if tokens and isinstance(tokens[0], (list, tuple)):
            return [list(t) for t in tokens]
        return [list(tokens)]

    def encode_text(self, query_tokens, text_tokens, train: bool = False,
                    rng=None, params: dict[str, Tensor] | None = None) -> EncodedText:
        """Encode [CLS] Q [SEP] T (or [CLS] T without a query).

        Accepts one sample (flat id lists) or a batch (lists of lists; the
        query batch may mix None and lists).  Overlength queries/texts are
        truncated to the configured caps.
        """
        c = self.config
        p = params or self.params
        texts = self._as_batch(text_tokens)
        if query_tokens is None:
            queries: list[list[int] | None] = [None] * len(texts)
        elif query_tokens and isinstance(query_tokens[0], (list, tuple, type(None))):
            queries = [None if q is None else list(q) for q in query_tokens]
        else:
            queries = [list(query_tokens)]
        if len(queries) != len(texts):
            raise ValueError(f"{len(queries)} queries for {len(texts)} texts")
        rows = []
        for q, t in zip(queries, texts):
            t = t[: c.max_text_len]
            if q:
                rows.append([CLS] + q[: c.max_query_len] + [SEP] + t)
            else:
                rows.append([CLS] + t)
        length = max(len(r) for r in rows)
        ids = np.zeros((len(rows), length), dtype=np.int64)
        mask = np.zeros((len(rows), length))
        for i, r in enumerate(rows):
            ids[i, : len(r)] = r
            mask[i, : len(r)] = 1.0
        positions = np.broadcast_to(np.arange(length), ids.shape)
        x = ad.add(ad.embedding_lookup(p["text.tok_emb"], ids),
                   ad.embedding_lookup(p["text.pos_emb"], positions))
        x = ad.layer_norm(x, p["text.emb_ln.g"], p["text.emb_ln.b"])
        x = self._dropout(x, train, rng)
        bias = self._additive_mask(mask)
        for i in range(c.text_layers):
            x = self._layer(f"text.l{i}", x, bias, p, train, rng)
        return EncodedText(states=x, cls=self._cls_of(x), mask=mask, ids=ids)

    def patchify(self, frames: np.ndarray) -> np.ndarray:
        """(B, J, H, W) frames -> (B, K, patch*patch) rows, frame-major."""
        c = self.config
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim == 3:
            frames = frames[None]
        if frames.ndim != 4 or frames.shape[2] != c.frame_h or frames.shape[3] != c.frame_w:
            raise ValueError(
                f"expected frames (B, J, {c.frame_h}, {c.frame_w}), got {frames.shape}"
            )
        b, j = frames.shape[:2]
        if j * c.patches_per_frame > c.max_patches:
            raise ValueError(f"{j} frames produce more than max_patches {c.max_patches}")
        s = c.patch_size
        gh, gw = c.frame_h // s, c.frame_w // s
        x = frames.reshape(b, j, gh, s, gw, s).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(x.reshape(b, j * gh * gw, s * s))

    def encode_image(self, frames, train: bool = False, rng=None,
                     params: dict[str, Tensor] | None = None) -> EncodedImage:
        """Patchify frames in chronological order, prefix [CLS], encode."""
        c = self.config
        p = params or self.params
        patches = self.patchify(frames)
        b, k = patches.shape[:2]
        proj = ad.add(ad.matmul(ad.constant(patches), p["vision.patch.w"]), p["vision.patch.b"])
        cls = ad.embedding_lookup(p["vision.cls"], np.zeros((b, 1), dtype=np.int64))
        x = ad.concat([cls, proj], axis=1)
        positions = np.broadcast_to(np.arange(k + 1), (b, k + 1))
        x = ad.add(x, ad.embedding_lookup(p["vision.pos_emb"], positions))
        x = ad.layer_norm(x, p["vision.emb_ln.g"], p["vision.emb_ln.b"])
        x = self._dropout(x, train, rng)
        for i in range(c.vision_layers):
            x = self._layer(f"vision.l{i}", x, None, p, train, rng)
        return EncodedImage(states=x, cls=self._cls_of(x))

    def fuse(self, text: EncodedText, image: EncodedImage, train: bool = False,
             rng=None) -> FusionOutput:
        """Self-attention over text states, cross-attention onto image states."""
        if text.states.shape[-1] != image.states.shape[-1]:
            raise ad.ShapeError(
                f"fuse: widths differ {text.states.shape} vs {image.states.shape}"
            )
        if text.states.shape[0] != image.states.shape[0]:
            raise ad.ShapeError(
                f"fuse: batch sizes differ {text.states.shape} vs {image.states.shape}"
            )
        x = text.states
        bias = self._additive_mask(text.mask)
        for i in range(self.config.fusion_layers):
            x = self._layer(f"fusion.l{i}", x, bias, self.params, train, rng,
                            cross_states=image.states)
        return FusionOutput(states=x, cls=self._cls_of(x))

    # -- heads ---------------------------------------------------------------

    def l2_normalize(self, x: Tensor, eps: float = 1e-12) -> Tensor:
        """Row-normalize (B, d) via exp(-0.5 log sumsq); stays in the op set."""
        ss = ad.reduce_sum(ad.mul(x, x), axis=1, keepdims=True)
        ss = ad.add(ss, ad.constant(np.full(ss.shape, eps)))
        inv = ad.exp(ad.scale(ad.log(ss), -0.5))
        full = ad.matmul(inv, ad.constant(np.ones((1, x.shape[1]))))
        return ad.mul(x, full)

    def relevance_params(self) -> RelevanceHeadParams:
        p = self.params
        return RelevanceHeadParams(
            w_pos=p["head.rel.pos.w"], b_pos=p["head.rel.pos.b"],
            w_le=p["head.rel.le.w"], b_le=p["head.rel.le.b"],
            w_ex=p["head.rel.ex.w"], b_ex=p["head.rel.ex.b"],
        )

    def relevance_head(self, z_cls: Tensor):
        return relevance_head(z_cls, self.relevance_params())

    def itm_head(self, z_cls: Tensor) -> Tensor:
        return two_class_head(z_cls, self.params["head.itm.w"], self.params["head.itm.b"])

    def pqvm_head(self, z_cls: Tensor) -> Tensor:
        return two_class_head(z_cls, self.params["head.pqvm.w"], self.params["head.pqvm.b"])

    def mlm_logits(self, fused_states: Tensor, positions: list[tuple[int, int]]) -> Tensor:
        """Vocabulary logits at the given (batch, position) slots, (M, V)."""
        if not positions:
            raise ValueError("mlm_logits needs at least one target position")
        rows = [ad.slice_(fused_states, (b, slice(l, l + 1), slice(None)))
                for b, l in positions]
        gathered = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        return ad.add(ad.matmul(gathered, self.params["head.mlm.w"]), self.params["head.mlm.b"])

    def bce_score(self, z_cls: Tensor) -> Tensor:
        return ad.sigmoid(ad.add(ad.matmul(z_cls, self.params["head.bce.w"]),
                                 self.params["head.bce.b"]))

    def mse_score(self, z_cls: Tensor) -> Tensor:
        return ad.add(ad.matmul(z_cls, self.params["head.mse.w"]), self.params["head.mse.b"])

    def ordinal_sigmoids(self, z_cls: Tensor) -> Tensor:
        return ad.sigmoid(ad.add(ad.matmul(z_cls, self.params["head.ord.w"]),
                                 self.params["head.ord.b"]))

    # -- checkpoints ----------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        """Binary checkpoint: header JSON + named little-endian float64 blobs."""
        header = {
            "config": asdict(self.config),
            "meta": meta or {},
            "params": list(self.params),
            "momentum": self.momentum_params is not None,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for name, p in self.params.items():
                self._write_blob(fh, name, p.data)
            if self.momentum_params is not None:
                for name, p in self.momentum_params.items():
                    self._write_blob(fh, f"momentum.{name}", p.data)

    @staticmethod
    def _write_blob(fh, name: str, arr: np.ndarray) -> None:
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @staticmethod
    def _read_blob(fh) -> tuple[str, np.ndarray]:
        raw = fh.read(4)
        if len(raw) != 4:
            raise CheckpointError("truncated checkpoint: missing blob name length")
        (n,) = struct.unpack("<I", raw)
        name = fh.read(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        count = int(np.prod(shape)) if shape else 1
        data = fh.read(8 * count)
        if len(data) != 8 * count:
            raise CheckpointError(f"truncated checkpoint: blob {name!r} is incomplete")
        return name, np.frombuffer(data, dtype="<f8").reshape(shape).copy()

    @classmethod
    def load(cls, path) -> tuple["Model", dict]:
        with open(path, "rb") as fh:
            if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: not a model checkpoint")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            config = ModelConfig(**header["config"])
            model = cls(config, np.random.default_rng(0))
            for expected in header["params"]:
                name, arr = cls._read_blob(fh)
                if name != expected:
                    raise CheckpointError(f"blob order mismatch: {name!r} vs {expected!r}")
                if name not in model.params or model.params[name].data.shape != arr.shape:
                    raise CheckpointError(f"unexpected parameter {name!r} of shape {arr.shape}")
                model.params[name].data = arr
            if header["momentum"]:
                model.init_momentum()
                for expected in model.momentum_params:
                    name, arr = cls._read_blob(fh)
                    if name != f"momentum.{expected}":
                        raise CheckpointError(f"momentum blob order mismatch at {name!r}")
                    model.momentum_params[expected].data = arr
            elif config.use_momentum:
                model.init_momentum()
        return model, header["meta"]
