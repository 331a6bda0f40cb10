"""Command-line entry point.

Subcommands: gen-corpus, extract-keywords, pretrain, finetune, evaluate.
Every command takes --config (flat key=value file, see docs/config.md),
--seed (overrides the config seed) and --out-dir (artifact directory).
Runs are deterministic given the seed: repeated invocations produce
byte-identical files.  Exit codes: 0 success, 2 missing config key,
1 any other error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import corpus as C
from . import train as T
from .config import MissingConfigKey, RunConfig, load_run_config
from .model import CheckpointError, Model
from .sampling import prepare_pretrain_docs
from .textproc import Vocab, render_keyword_text

__all__ = ["main"]


def _rng(rc: RunConfig, stream: int) -> np.random.Generator:
    # independent deterministic streams per purpose, all derived from the seed
    return np.random.default_rng((rc.seed, stream))


def _load_prepared(rc: RunConfig):
    docs = C.load_videos(rc.corpus_path)
    vocab = Vocab.from_docs(docs)
    keywords = C.keyword_index(docs, rc.keywords_per_video)
    prepared = prepare_pretrain_docs(docs, keywords, vocab)
    return docs, vocab, keywords, prepared


def _write_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in columns])


def cmd_gen_corpus(rc: RunConfig, args, out_dir: Path) -> int:
    docs = C.generate_corpus(rc.corpus_config())
    C.save_videos(rc.corpus_path, docs)
    train_pairs = C.generate_labeled_pairs(
        docs, rc.pairs_per_label, seed=(rc.seed, 1),
        keywords_per_video=rc.keywords_per_video,
        query_min_words=rc.query_min_words, query_max_words=rc.query_max_words)
    C.save_pairs(rc.pairs_path, train_pairs)
    print(f"wrote {len(docs)} videos to {rc.corpus_path}")
    print(f"wrote {len(train_pairs)} labeled pairs to {rc.pairs_path}")
    if rc.eval_pairs_path:
        eval_pairs = C.generate_labeled_pairs(
            docs, rc.eval_pairs_per_label, seed=(rc.seed, 2),
            keywords_per_video=rc.keywords_per_video,
            query_min_words=rc.query_min_words, query_max_words=rc.query_max_words)
        C.save_pairs(rc.eval_pairs_path, eval_pairs)
        print(f"wrote {len(eval_pairs)} labeled pairs to {rc.eval_pairs_path}")
    return 0


def cmd_extract_keywords(rc: RunConfig, args, out_dir: Path) -> int:
    docs, _, keywords, _ = _load_prepared(rc)
    path = out_dir / "keywords.jsonl"
    records = []
    for doc in docs:
        seq = keywords[doc.id]
        records.append({
            "id": doc.id,
            "words": seq.words,
            "weights": seq.weights,
            "text": render_keyword_text(seq),
        })
    C.save_jsonl(path, records)
    print(f"wrote keywords for {len(records)} videos to {path}")
    return 0


def _checkpoint_saver(rc: RunConfig, out_dir: Path, prefix: str, meta: dict):
    def on_step(step: int, model: Model) -> None:
        if rc.checkpoint_every > 0 and (step + 1) % rc.checkpoint_every == 0:
            model.save(out_dir / f"{prefix}_{step + 1:06d}.ckpt", meta=meta)
    return on_step


def cmd_pretrain(rc: RunConfig, args, out_dir: Path) -> int:
    _, vocab, _, prepared = _load_prepared(rc)
    objectives = rc.objective_tuple()
    model = Model(rc.model_config(len(vocab)), _rng(rc, 10))
    meta = {"phase": "pretrain", "objectives": list(objectives),
            "corpus_vocab_size": len(vocab), "seed": rc.seed}
    rows = T.run_pretrain(model, prepared, objectives, rc, _rng(rc, 11),
                          on_step=_checkpoint_saver(rc, out_dir, "pretrain", meta))
    columns = ["step", *objectives, "total"]
    log_path = out_dir / "pretrain_log.csv"
    _write_csv(log_path, rows, columns)
    ckpt_path = out_dir / "pretrain_final.ckpt"
    model.save(ckpt_path, meta=meta)
    print(f"pretrained {rc.pretrain_steps} steps on objectives {','.join(objectives)}")
    print(f"final total loss {rows[-1]['total']:.4f}; log {log_path}; checkpoint {ckpt_path}")
    return 0


def cmd_finetune(rc: RunConfig, args, out_dir: Path) -> int:
    _, vocab, _, prepared = _load_prepared(rc)
    pairs = C.load_pairs(rc.pairs_path)
    if args.init:
        model, _ = Model.load(args.init)
        _check_compat(model, rc, len(vocab))
    else:
        model = Model(rc.model_config(len(vocab)), _rng(rc, 10))
    docs_by_id = {d.doc_id: d for d in prepared}
    meta = {"phase": "finetune", "finetune_loss": rc.finetune_loss,
            "corpus_vocab_size": len(vocab), "seed": rc.seed}
    rows = T.run_finetune(model, pairs, docs_by_id, vocab, rc, _rng(rc, 12),
                          on_step=_checkpoint_saver(rc, out_dir, "finetune", meta))
    columns = ["step", rc.finetune_loss]
    if rc.finetune_loss == "hier_softmax":
        columns.append("mean_r")
    log_path = out_dir / "finetune_log.csv"
    _write_csv(log_path, rows, columns)
    ckpt_path = out_dir / "finetune_final.ckpt"
    model.save(ckpt_path, meta=meta)
    print(f"fine-tuned on {len(pairs)} pairs with {rc.finetune_loss} loss")
    print(f"final loss {rows[-1][rc.finetune_loss]:.4f}; log {log_path}; checkpoint {ckpt_path}")
    return 0


def _check_compat(model: Model, rc: RunConfig, vocab_size: int) -> None:
    expected = asdict(rc.model_config(vocab_size))
    actual = asdict(model.config)
    mismatched = sorted(k for k in expected if expected[k] != actual[k])
    if mismatched:
        detail = ", ".join(f"{k} (config {expected[k]!r} vs checkpoint {actual[k]!r})"
                           for k in mismatched)
        raise CheckpointError(f"checkpoint does not match config: {detail}")


def cmd_evaluate(rc: RunConfig, args, out_dir: Path) -> int:
    _, vocab, _, prepared = _load_prepared(rc)
    pairs_path = args.pairs or rc.eval_pairs_path or rc.pairs_path
    pairs = C.load_pairs(pairs_path)
    model, meta = Model.load(args.checkpoint)
    _check_compat(model, rc, len(vocab))
    head = meta.get("finetune_loss") or rc.finetune_loss
    docs_by_id = {d.doc_id: d for d in prepared}
    missing = {p.video_id for p in pairs} - set(docs_by_id)
    if missing:
        raise ValueError(f"pairs reference videos absent from the corpus, "
                         f"e.g. {sorted(missing)[0]!r}")
    scores = T.score_pairs(model, pairs, docs_by_id, vocab, head=head)
    from .metrics import EvalRecord, metric_report
    records = [EvalRecord(score=float(s), label=p.label) for s, p in zip(scores, pairs)]
    report = metric_report(records)
    payload = json.dumps(report, sort_keys=True)
    (out_dir / "metrics.json").write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


_COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "extract-keywords": cmd_extract_keywords,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidrel",
        description="Query/short-video relevance: corpus generation, keyword "
                    "extraction, pre-training, fine-tuning and evaluation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out-dir", default="runs", help="directory for artifacts")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common],
                   help="generate videos.jsonl and labeled pairs")
    sub.add_parser("extract-keywords", parents=[common],
                   help="write per-video keyword sequences")
    sub.add_parser("pretrain", parents=[common],
                   help="train the active pre-training objectives")
    ft = sub.add_parser("finetune", parents=[common],
                        help="fine-tune the relevance head on labeled pairs")
    ft.add_argument("--init", default=None, help="checkpoint to start from")
    ev = sub.add_parser("evaluate", parents=[common],
                        help="score pairs with a checkpoint and report metrics")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--pairs", default=None, help="override the pairs file")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        rc = load_run_config(args.config, seed=args.seed)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        return _COMMANDS[args.command](rc, args, out_dir)
    except MissingConfigKey as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except T.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
