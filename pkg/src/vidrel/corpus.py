"""Synthetic video corpora with known latent structure, plus JSONL persistence.

Every downstream claim in this package is checked against ground truth, so
the generator plants it explicitly: each document draws a latent topic,
its text fields sample from a topic-conditional word distribution (topics
overlap with their ring neighbours), and its frames render a topic-keyed
intensity pattern plus noise.  Ordinal relevance labels are then synthesized
by topic distance, which makes label order learnable by construction.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .textproc import KeywordSequence, TextField, build_corpus_stats, extract_keywords

__all__ = [
    "CorpusConfig", "VideoDoc", "LabeledPair", "JsonlError",
    "generate_corpus", "generate_labeled_pairs", "keyword_index",
    "save_jsonl", "load_jsonl",
    "video_to_json", "video_from_json", "pair_to_json", "pair_from_json",
    "save_videos", "load_videos", "save_pairs", "load_pairs",
]

DEFAULT_FIELD_ALPHAS = {"title": 2.0, "description": 1.0, "ocr": 1.0, "asr": 0.5}

# Topic-conditional sampling mixture: own vocabulary block dominates, ring
# neighbours bleed in, and a small uniform floor keeps every word reachable.
OWN_BLOCK_MASS = 0.70
NEIGHBOR_MASS = 0.12
UNIFORM_MASS = 0.06
FRAME_NOISE_STD = 0.06
FRAME_GRID = 4


class JsonlError(ValueError):
    """A JSONL line failed to parse or convert; message names the line."""


@dataclass
class CorpusConfig:
    num_docs: int = 120
    num_topics: int = 8
    frames_per_video: int = 3
    frame_h: int = 16
    frame_w: int = 16
    vocab_size: int = 320
    words_per_field: int = 8
    identity_vocab_size: int = 120
    identity_words_per_doc: int = 3
    field_alphas: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_FIELD_ALPHAS))
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_docs", "num_topics", "frames_per_video", "frame_h",
                     "frame_w", "vocab_size", "words_per_field"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.identity_vocab_size < 0 or self.identity_words_per_doc < 0:
            raise ValueError("identity sizes must be non-negative")
        if self.identity_words_per_doc > self.identity_vocab_size:
            raise ValueError("identity_words_per_doc exceeds the identity pool")
        if self.topic_vocab_size < self.num_topics:
            raise ValueError(
                f"vocab_size {self.vocab_size} leaves fewer topic words than "
                f"num_topics {self.num_topics}"
            )
        if not self.field_alphas:
            raise ValueError("field_alphas must name at least one field")

    @property
    def topic_vocab_size(self) -> int:
        return self.vocab_size - self.identity_vocab_size


@dataclass
class VideoDoc:
    """One video ad: weighted text fields plus frames in [0, 1]."""

    id: str
    fields: list[TextField]
    frames: np.ndarray  # (J, H, W) float64
    latent_topic: int  # generator-only ground truth

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (J, H, W) with J >= 1, got {self.frames.shape}")
        if self.frames.size and (self.frames.min() < 0.0 or self.frames.max() > 1.0):
            raise ValueError("frame pixels must lie in [0, 1]")


@dataclass
class LabeledPair:
    """A (query, video) pair with an ordinal relevance label 0..3."""

    query: list[str]
    video_id: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1, 2, 3):
            raise ValueError(f"label must be in {{0,1,2,3}}, got {self.label}")


def _topic_word_probs(vocab_size: int, num_topics: int) -> np.ndarray:
    """Per-topic word distributions over the synthetic vocabulary."""
    block = vocab_size // num_topics
    probs = np.full((num_topics, vocab_size), UNIFORM_MASS / vocab_size)

    def block_weights(t: int) -> tuple[np.ndarray, np.ndarray]:
        idx = np.arange(t * block, (t + 1) * block)
        w = 1.0 / (np.arange(block) + 1.0)  # mildly Zipfian: stable top words
        return idx, w / w.sum()

    for t in range(num_topics):
        idx, w = block_weights(t)
        probs[t, idx] += OWN_BLOCK_MASS * w
        for nb in ((t - 1) % num_topics, (t + 1) % num_topics):
            if nb == t:
                continue
            idx, w = block_weights(nb)
            probs[t, idx] += NEIGHBOR_MASS * w
    return probs / probs.sum(axis=1, keepdims=True)


def _topic_pattern(seed: int, topic: int, h: int, w: int) -> np.ndarray:
    """Deterministic per-topic intensity blocks on a coarse grid."""
    rng = np.random.default_rng((seed, topic, 9157))
    cells = rng.uniform(0.1, 0.9, size=(FRAME_GRID, FRAME_GRID))
    ys = (np.arange(h) * FRAME_GRID) // h
    xs = (np.arange(w) * FRAME_GRID) // w
    return cells[np.ix_(ys, xs)]


def generate_corpus(config: CorpusConfig) -> list[VideoDoc]:
    """Deterministic synthetic corpus for the given (config, seed).

    Topic-block words give each document its theme; a handful of document
    identity words (the synthetic stand-in for brand/entity terms, repeated
    across every field) give it an individual signature that keyword
    extraction will rank highly.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    topic_words = np.array([f"w{i:03d}" for i in range(config.topic_vocab_size)])
    identity_words = np.array([f"id{i:03d}" for i in range(config.identity_vocab_size)])
    probs = _topic_word_probs(config.topic_vocab_size, config.num_topics)
    patterns = [
        _topic_pattern(config.seed, t, config.frame_h, config.frame_w)
        for t in range(config.num_topics)
    ]
    docs: list[VideoDoc] = []
    for i in range(config.num_docs):
        topic = int(rng.integers(config.num_topics))
        if config.identity_words_per_doc:
            ids = identity_words[rng.choice(config.identity_vocab_size,
                                            size=config.identity_words_per_doc,
                                            replace=False)]
        else:
            ids = identity_words[:0]
        fields = []
        for name, alpha in config.field_alphas.items():
            drawn = rng.choice(config.topic_vocab_size, size=config.words_per_field,
                               p=probs[topic])
            text = " ".join(np.concatenate([ids, topic_words[drawn]]))
            fields.append(TextField(name=name, text=text, alpha=alpha))
        noise = rng.normal(0.0, FRAME_NOISE_STD,
                           size=(config.frames_per_video, config.frame_h, config.frame_w))
        frames = np.clip(patterns[topic][None, :, :] + noise, 0.0, 1.0)
        docs.append(VideoDoc(id=f"v{i:05d}", fields=fields, frames=frames, latent_topic=topic))
    return docs


def keyword_index(docs: list[VideoDoc], k: int) -> dict[str, KeywordSequence]:
    """Per-document keyword sequences under corpus-wide TF-IDF statistics."""
    stats = build_corpus_stats(docs)
    return {doc.id: extract_keywords(doc.fields, k, stats) for doc in docs}


def _ring_distance(a: int, b: int, n: int) -> int:
    d = abs(a - b) % n
    return min(d, n - d)


def generate_labeled_pairs(
    corpus: list[VideoDoc],
    pairs_per_label: int,
    seed,
    keywords_per_video: int = 12,
    query_min_words: int = 1,
    query_max_words: int = 3,
) -> list[LabeledPair]:
    """Synthesize ordinal labels by topic distance.

    label 3: query drawn from the video's own top keywords;
    label 2: query from a different same-topic video;
    label 1: query from a ring-adjacent topic;
    label 0: query from a topic at ring distance >= 2 (any different topic
    when fewer than four topics exist, which blurs levels 0 and 1).
    """
    if not corpus:
        raise ValueError("corpus is empty")
    num_topics = max(doc.latent_topic for doc in corpus) + 1
    if num_topics < 2:
        raise ValueError("need at least 2 topics to synthesize all four label levels")
    rng = np.random.default_rng(seed)
    keywords = keyword_index(corpus, keywords_per_video)
    by_topic: dict[int, list[VideoDoc]] = {}
    for doc in corpus:
        by_topic.setdefault(doc.latent_topic, []).append(doc)

    def pick(docs: list[VideoDoc]) -> VideoDoc:
        return docs[int(rng.integers(len(docs)))]

    def query_from(doc: VideoDoc) -> list[str]:
        # an order-preserving sample from the head of the keyword list, so
        # queries mix identity words with strong topical words
        words = keywords[doc.id].words
        pool = min(len(words), 2 * query_max_words)
        n = int(rng.integers(query_min_words, min(query_max_words, pool) + 1))
        chosen = sorted(rng.choice(pool, size=n, replace=False))
        return [words[i] for i in chosen]

    def topic_at_distance(t: int, want) -> int:
        choices = [u for u in by_topic if want(_ring_distance(t, u, num_topics))]
        return choices[int(rng.integers(len(choices)))]

    pairs: list[LabeledPair] = []
    for label in (3, 2, 1, 0):
        for _ in range(pairs_per_label):
            video = pick(corpus)
            t = video.latent_topic
            if label == 3:
                source = video
            elif label == 2:
                peers = [d for d in by_topic[t] if d.id != video.id]
                while not peers:  # lone doc in its topic: re-draw the video
                    video = pick(corpus)
                    t = video.latent_topic
                    peers = [d for d in by_topic[t] if d.id != video.id]
                source = pick(peers)
            elif label == 1:
                source = pick(by_topic[topic_at_distance(t, lambda d: d == 1)])
            else:
                far = (lambda d: d >= 2) if num_topics >= 4 else (lambda d: d >= 1)
                source = pick(by_topic[topic_at_distance(t, far)])
            if not keywords[source.id].words:
                continue
            pairs.append(LabeledPair(query=query_from(source), video_id=video.id, label=label))
    return pairs


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_jsonl(path, records: list[dict]) -> None:
    """One canonical JSON object per line (sorted keys, no whitespace)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_jsonl(path, convert=None) -> list:
    """Parse a JSONL file; any bad line raises JsonlError naming the line."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(convert(rec) if convert else rec)
            except (ValueError, KeyError, TypeError) as exc:
                raise JsonlError(f"{path}: line {lineno}: {exc}") from exc
    return out


def _encode_floats(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode_floats(text: str, count: int) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != count:
        raise ValueError(f"frame payload holds {arr.size} floats, expected {count}")
    return arr.copy()


def video_to_json(doc: VideoDoc) -> dict:
    j, h, w = doc.frames.shape
    return {
        "id": doc.id,
        "fields": [{"name": f.name, "text": f.text, "alpha": f.alpha} for f in doc.fields],
        "frames": _encode_floats(doc.frames),
        "J": j,
        "H": h,
        "W": w,
        "latent_topic": doc.latent_topic,
    }


def video_from_json(rec: dict) -> VideoDoc:
    j, h, w = int(rec["J"]), int(rec["H"]), int(rec["W"])
    frames = _decode_floats(rec["frames"], j * h * w).reshape(j, h, w)
    fields = [TextField(name=f["name"], text=f["text"], alpha=float(f["alpha"]))
              for f in rec["fields"]]
    return VideoDoc(id=rec["id"], fields=fields, frames=frames,
                    latent_topic=int(rec["latent_topic"]))


def pair_to_json(pair: LabeledPair) -> dict:
    return {"query": list(pair.query), "video_id": pair.video_id, "label": pair.label}


def pair_from_json(rec: dict) -> LabeledPair:
    return LabeledPair(query=list(rec["query"]), video_id=rec["video_id"],
                       label=int(rec["label"]))


def save_videos(path, docs: list[VideoDoc]) -> None:
    save_jsonl(path, [video_to_json(d) for d in docs])


def load_videos(path) -> list[VideoDoc]:
    return load_jsonl(path, convert=video_from_json)


def save_pairs(path, pairs: list[LabeledPair]) -> None:
    save_jsonl(path, [pair_to_json(p) for p in pairs])


def load_pairs(path) -> list[LabeledPair]:
    return load_jsonl(path, convert=pair_from_json)
