"""Command-line interface: ``shan {train,eval,score,ablate,grad-check,synth}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .corpus import (
    EmbeddingSource,
    build_vocabulary,
    load_feature_pack,
    load_word_vectors,
    synth_corpus,
    write_synthetic,
)
from .errors import ShanError
from .evaluation import STANDARD_GRID, evaluate, export_attention, run_ablation
from .model import load_checkpoint
from .trainer import TrainConfig, fit, grad_check_model

log = logging.getLogger("shan")


def _load_inputs(pack_dir: str, cfg: TrainConfig):
    pack = load_feature_pack(pack_dir)
    vocab = build_vocabulary((c.tokens for c in pack.captions), cfg.min_count)
    vectors = cfg.word_vectors
    if vectors is None and (Path(pack_dir) / "vectors.txt").exists():
        vectors = str(Path(pack_dir) / "vectors.txt")
    embeddings = None
    if vectors is not None:
        src = load_word_vectors(vectors, vocab)
        embeddings = EmbeddingSource(src.fixed_table, cfg.embedding_mode, src.known)
    return pack, vocab, embeddings


def _read_config(path: str | None, **overrides) -> TrainConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(data)


def cmd_train(args) -> int:
    cfg = _read_config(args.config, seed=args.seed)
    pack, vocab, embeddings = _load_inputs(args.pack, cfg)
    val = load_feature_pack(args.val_pack) if args.val_pack else None
    log_path = args.log or f"{args.out}.log.jsonl"
    _, trainlog = fit(pack, cfg, vocab, embeddings, val_pack=val, checkpoint_path=args.out, log_path=log_path)
    print(json.dumps({"checkpoint": args.out, "log": log_path, "final_loss": trainlog.losses[-1]}))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt, precision=args.precision)
    pack = load_feature_pack(args.pack)
    report = evaluate(pack, model, block_size=args.block_size, folds=args.folds)
    text = json.dumps(report.to_dict(), indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return 0


def cmd_score(args) -> int:
    model = load_checkpoint(args.ckpt, precision=args.precision)
    pack = load_feature_pack(args.pack)
    breakdown, _ = export_attention(pack, model, args.image, args.caption, args.trace)
    print(json.dumps(dataclasses.asdict(breakdown), indent=2))
    return 0


def cmd_ablate(args) -> int:
    spec = json.loads(Path(args.grid).read_text())
    if isinstance(spec, list):
        base, grid = {}, spec
    else:
        base, grid = spec.get("base", {}), spec.get("grid", STANDARD_GRID)
    base_cfg = _read_config(args.config, **base)
    pack, vocab, embeddings = _load_inputs(args.pack, base_cfg)
    text, rows = run_ablation(pack, base_cfg, grid, vocab, embeddings, out_path=args.out)
    print(text, end="")
    return 1 if any("error" in r for r in rows) else 0


def cmd_grad_check(args) -> int:
    result = grad_check_model(seed=args.seed)
    for group, err in result.per_group.items():
        status = "ok" if err < result.tolerance else "FAIL"
        print(f"{group:<14} max rel err {err:.3e}  {status}")
    print(f"frozen embedding grad |g|_1 = {result.frozen_grad_norm:.1e}")
    print(f"{result.coordinates} coordinates, loss {result.loss:.4f}, {result.seconds:.2f}s")
    if not result.ok:
        print(f"gradient check failed for: {', '.join(result.failures)}", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    corpus = synth_corpus(
        args.images,
        args.captions_per_image,
        args.regions,
        args.words,
        args.noise,
        args.seed,
        feature_dim=args.feature_dim,
        word_dim=args.word_dim,
    )
    write_synthetic(corpus, args.out)
    print(json.dumps({"out": args.out, "images": len(corpus.pack.images), "captions": len(corpus.pack.captions)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shan", description="Step-wise hierarchical alignment for image-text matching.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a feature pack")
    p.add_argument("--pack", required=True, help="feature pack directory")
    p.add_argument("--config", help="JSON training config (TrainConfig fields)")
    p.add_argument("--out", required=True, help="checkpoint path, rewritten every epoch")
    p.add_argument("--val-pack", help="validation pack; adds Recall@K to the epoch log")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--log", help="JSON-lines epoch log (default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall@K / Rsum of a checkpoint on a pack")
    p.add_argument("--pack", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--folds", type=int, default=1, help="average over N image partitions")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--precision", default="float32", choices=["float32", "float64"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score one pair, optionally exporting its attention trace")
    p.add_argument("--pack", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--trace", help="write the attention trace JSON here")
    p.add_argument("--precision", default="float64", choices=["float32", "float64"])
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="train/evaluate a grid of stage and embedding settings")
    p.add_argument("--pack", required=True)
    p.add_argument("--grid", required=True, help='JSON list of overrides, or {"base": {...}, "grid": [...]}')
    p.add_argument("--config", help="base TrainConfig JSON")
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter group")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("synth", help="write a synthetic planted-code feature pack")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--captions-per-image", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--regions", type=int, default=36)
    p.add_argument("--words", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=2048)
    p.add_argument("--word-dim", type=int, default=300)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ShanError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
