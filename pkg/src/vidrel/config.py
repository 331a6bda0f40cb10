"""Flat key=value run configuration.

The file format is one ``key = value`` assignment per line; blank lines and
``#`` comments are ignored.  docs/config.md is the normative key reference.
Unknown keys are rejected so typos fail loudly, and a missing required key
raises :class:`MissingConfigKey` (exit code 2 at the CLI).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .corpus import CorpusConfig
from .model import ModelConfig

__all__ = ["ConfigError", "MissingConfigKey", "RunConfig",
           "parse_flat_file", "load_run_config"]


class ConfigError(ValueError):
    """Malformed configuration file or value."""


class MissingConfigKey(ConfigError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"missing config key: {key}")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    # paths
    corpus_path: str
    pairs_path: str
    eval_pairs_path: str = ""
    # corpus generation
    num_docs: int = 120
    num_topics: int = 8
    frames_per_video: int = 3
    frame_h: int = 16
    frame_w: int = 16
    gen_vocab_size: int = 240
    words_per_field: int = 8
    alpha_title: float = 2.0
    alpha_description: float = 1.0
    alpha_ocr: float = 1.0
    alpha_asr: float = 0.5
    pairs_per_label: int = 100
    eval_pairs_per_label: int = 50
    keywords_per_video: int = 12
    query_min_words: int = 1
    query_max_words: int = 3
    # model
    d_model: int = 64
    n_heads: int = 4
    text_layers: int = 2
    vision_layers: int = 2
    fusion_layers: int = 2
    max_text_len: int = 64
    max_query_len: int = 16
    patch_size: int = 8
    max_patches: int = 48
    temperature: float = 0.07
    ema_momentum: float = 0.995
    alpha_soft: float = 0.0
    use_momentum: bool = False
    dropout: float = 0.1
    # training
    batch_size: int = 8
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-4
    finetune_epochs: int = 4
    finetune_lr: float = 1e-3
    warmup_steps: int = 20
    weight_decay: float = 0.02
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    split_a: int = 1
    split_b: int = 3
    mask_ratio: float = 0.15
    lambda_reg: float = 1.0
    objectives: str = "itc,itm,mlm,pqvm"
    finetune_loss: str = "hier_softmax"
    checkpoint_every: int = 100
    seed: int = 0

    def objective_tuple(self) -> tuple[str, ...]:
        parts = tuple(p.strip() for p in self.objectives.split(",") if p.strip())
        if not parts:
            raise ConfigError("objectives must name at least one of itc,itm,mlm,pqvm")
        return parts

    def field_alphas(self) -> dict[str, float]:
        return {
            "title": self.alpha_title,
            "description": self.alpha_description,
            "ocr": self.alpha_ocr,
            "asr": self.alpha_asr,
        }

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            num_docs=self.num_docs,
            num_topics=self.num_topics,
            frames_per_video=self.frames_per_video,
            frame_h=self.frame_h,
            frame_w=self.frame_w,
            vocab_size=self.gen_vocab_size,
            words_per_field=self.words_per_field,
            field_alphas=self.field_alphas(),
            seed=self.seed,
        )

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            text_layers=self.text_layers,
            vision_layers=self.vision_layers,
            fusion_layers=self.fusion_layers,
            max_text_len=self.max_text_len,
            max_query_len=self.max_query_len,
            patch_size=self.patch_size,
            max_patches=self.max_patches,
            frame_h=self.frame_h,
            frame_w=self.frame_w,
            frames_per_video=self.frames_per_video,
            temperature=self.temperature,
            momentum=self.ema_momentum,
            alpha_soft=self.alpha_soft,
            use_momentum=self.use_momentum,
            dropout=self.dropout,
        )


_REQUIRED = {"corpus_path", "pairs_path"}
# dataclass field annotations are strings under `from __future__ import annotations`
_PARSERS = {"str": str, "int": int, "float": float, "bool": _parse_bool}


def parse_flat_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment."""
    raw: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = body.split("=", 1)
            key = key.strip()
            if key in raw:
                raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
            raw[key] = value.strip()
    return raw


def load_run_config(path, seed: int | None = None) -> RunConfig:
    raw = parse_flat_file(path)
    known = {f.name: f.type for f in fields(RunConfig)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    values = {}
    for f in fields(RunConfig):
        if f.name in raw:
            try:
                values[f.name] = _PARSERS[str(f.type)](raw[f.name])
            except ValueError as exc:
                raise ConfigError(f"{path}: key {f.name!r}: {exc}") from exc
        elif f.name in _REQUIRED:
            raise MissingConfigKey(f.name)
    rc = RunConfig(**values)
    if seed is not None:
        rc.seed = seed
    return rc
