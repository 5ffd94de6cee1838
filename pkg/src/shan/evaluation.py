"""Recall@K retrieval evaluation, attention export and ablation runs."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .alignment import AlignmentTrace, similarity
from .corpus import EmbeddingSource, FeaturePack, Vocabulary, pad_token_ids
from .errors import IntegrityError, ParameterError
from .model import Model

log = logging.getLogger(__name__)

KS = (1, 5, 10)
CSV_COLUMNS = (
    "config_id", "variant", "stages", "embedding_mode",
    "tr_r1", "tr_r5", "tr_r10", "ir_r1", "ir_r5", "ir_r10", "rsum",
)


def best_gt_rank(sim: np.ndarray, ground_truth: Sequence[Sequence[int]]) -> np.ndarray:
    """0-based rank of the best-placed correct candidate for every query.

    Candidates are ordered by descending score, ties by ascending index, so
    the rank of candidate c is the number of candidates scoring higher plus
    the number with an equal score and a smaller index.
    """
    sim = np.asarray(sim)
    if sim.ndim != 2:
        raise ParameterError(f"similarity matrix must be 2-d, got shape {sim.shape}")
    if len(ground_truth) != sim.shape[0]:
        raise IntegrityError(f"{len(ground_truth)} ground-truth sets for {sim.shape[0]} queries")
    ranks = np.empty(sim.shape[0], dtype=np.int64)
    cols = np.arange(sim.shape[1])
    for q, gt in enumerate(ground_truth):
        gt = np.asarray(list(gt), dtype=np.int64)
        if gt.size == 0:
            raise IntegrityError(f"query {q} has no ground-truth candidate")
        row = sim[q]
        s = row[gt][:, None]
        ahead = (row[None, :] > s) | ((row[None, :] == s) & (cols[None, :] < gt[:, None]))
        ranks[q] = ahead.sum(axis=1).min()
    return ranks


def recall_at_k(sim: np.ndarray, ground_truth: Sequence[Sequence[int]], K: int) -> float:
    """Percentage of queries with a correct candidate in their top ``K``."""
    sim = np.asarray(sim)
    if not 1 <= K <= sim.shape[1]:
        raise ParameterError(f"K={K} outside 1..{sim.shape[1]}")
    return 100.0 * float(np.mean(best_gt_rank(sim, ground_truth) < K))


@dataclass
class RetrievalReport:
    tr_r1: float
    tr_r5: float
    tr_r10: float
    ir_r1: float
    ir_r5: float
    ir_r10: float
    rsum: float
    n_text_queries: int
    n_image_queries: int
    folds: int = 1
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def recalls(self) -> tuple[float, ...]:
        return (self.tr_r1, self.tr_r5, self.tr_r10, self.ir_r1, self.ir_r5, self.ir_r10)


def _recall_capped(ranks: np.ndarray, K: int) -> float:
    return 100.0 * float(np.mean(ranks < K))


def report_from_matrix(sim: np.ndarray, caption_image: Sequence[int], config: Mapping | None = None) -> RetrievalReport:
    """Both retrieval directions from an (images x captions) score matrix.

    ``caption_image[c]`` is the row index of caption ``c``'s image. Text
    retrieval: each image ranks all captions and succeeds if any of its own
    captions is in the top K. Image retrieval: each caption ranks all images.
    With fewer candidates than K every query trivially succeeds at K.
    """
    sim = np.asarray(sim, dtype=np.float64)
    caption_image = np.asarray(caption_image, dtype=np.int64)
    n_img, n_cap = sim.shape
    own = [np.flatnonzero(caption_image == i) for i in range(n_img)]
    text_ranks = best_gt_rank(sim, own)
    image_ranks = best_gt_rank(sim.T, [[i] for i in caption_image])
    tr = [_recall_capped(text_ranks, K) for K in KS]
    ir = [_recall_capped(image_ranks, K) for K in KS]
    return RetrievalReport(*tr, *ir, rsum=float(sum(tr) + sum(ir)), n_text_queries=n_img,
                           n_image_queries=n_cap, config=dict(config or {}))


def similarity_matrix(pack: FeaturePack, model: Model, block_size: int = 64) -> np.ndarray:
    """Full (images x captions) score matrix, computed in square blocks without a tape."""
    if block_size < 1:
        raise ParameterError("block_size must be >= 1")
    vocab = model.vocab
    feats = np.stack([img.features for img in pack.images])
    ids = [vocab.encode(c.tokens) for c in pack.captions]
    out = np.empty((len(pack.images), len(pack.captions)), dtype=np.float64)
    for c0 in range(0, len(ids), block_size):
        token_ids, lengths = pad_token_ids(ids[c0 : c0 + block_size], vocab.pad_id)
        mask = np.arange(token_ids.shape[1])[None, :] < lengths[:, None]
        for i0 in range(0, len(feats), block_size):
            scores = model.score(feats[i0 : i0 + block_size], token_ids, mask)
            out[i0 : i0 + block_size, c0 : c0 + len(lengths)] = scores.total.data
    return out


def evaluate(pack: FeaturePack, model: Model, block_size: int = 64, folds: int = 1) -> RetrievalReport:
    """Recall@{1,5,10} in both directions plus Rsum, averaged over ``folds`` image partitions."""
    if folds < 1 or folds > len(pack.images):
        raise ParameterError(f"folds must lie in 1..{len(pack.images)}")
    h = model.hyper
    config = {"variant": h.variant, "stages": h.stages, "embedding_mode": model.config.embedding_mode}
    if folds == 1:
        sim = similarity_matrix(pack, model, block_size)
        return report_from_matrix(sim, pack.caption_image_positions(), config)
    reports = []
    for part in np.array_split(np.arange(len(pack.images)), folds):
        sub = pack.subset([pack.images[i].id for i in part])
        reports.append(report_from_matrix(similarity_matrix(sub, model, block_size), sub.caption_image_positions()))
    mean = {name: float(np.mean([getattr(r, name) for r in reports])) for name in
            ("tr_r1", "tr_r5", "tr_r10", "ir_r1", "ir_r5", "ir_r10")}
    return RetrievalReport(
        **mean,
        rsum=float(sum(mean.values())),
        n_text_queries=sum(r.n_text_queries for r in reports),
        n_image_queries=sum(r.n_image_queries for r in reports),
        folds=folds,
        config=config,
    )


def export_attention(pack: FeaturePack, model: Model, image_id: str, caption_id: str, out_path=None):
    """Score one pair with tracing; write the trace JSON when ``out_path`` is given."""
    image = pack.image(image_id)
    caption = pack.caption(caption_id)
    breakdown, trace = similarity(
        np.asarray(image.features, dtype=model.dtype),
        model.vocab.encode(caption.tokens),
        model.params,
        model.hyper,
        model.config.embedding_mode,
        model.fixed_table,
        trace_requested=True,
    )
    trace.meta = {
        "image_id": image_id,
        "caption_id": caption_id,
        "tokens": list(caption.tokens),
        "scores": dataclasses.asdict(breakdown),
    }
    if out_path is not None:
        trace.write_json(out_path)
    return breakdown, trace


# ---------------------------------------------------------------------------
# ablation


def run_ablation(
    pack: FeaturePack,
    base_cfg,
    grid: Sequence[Mapping],
    vocab: Vocabulary,
    embeddings: EmbeddingSource | None,
    eval_pack: FeaturePack | None = None,
    out_path: str | Path | None = None,
) -> tuple[str, list[dict]]:
    """Train and evaluate one model per grid entry with the base config's seed.

    Each entry overrides TrainConfig fields (``variant``, ``stages``,
    ``embedding_mode``, ...) and may carry a ``config_id``. A failing entry
    yields a row whose metric cells read ``ERROR``; later rows still run.
    Returns the CSV text and the row dicts.
    """
    from .trainer import TrainConfig, fit

    eval_pack = eval_pack or pack
    rows = []
    for idx, entry in enumerate(grid):
        entry = dict(entry)
        config_id = str(entry.pop("config_id", f"cfg{idx:02d}"))
        row = {"config_id": config_id}
        try:
            cfg = TrainConfig.from_dict({**base_cfg.to_dict(), **entry})
            row.update(variant=cfg.variant, stages=cfg.stages, embedding_mode=cfg.embedding_mode)
            model, _ = fit(pack, cfg, vocab, embeddings)
            report = evaluate(eval_pack, model, block_size=cfg.eval_block_size)
            row.update(
                tr_r1=report.tr_r1, tr_r5=report.tr_r5, tr_r10=report.tr_r10,
                ir_r1=report.ir_r1, ir_r5=report.ir_r5, ir_r10=report.ir_r10, rsum=report.rsum,
            )
        except Exception as exc:  # a failed row must not stop the sweep
            log.error("ablation row %s failed: %s", config_id, exc)
            for key in ("variant", "stages", "embedding_mode"):
                row.setdefault(key, entry.get(key, getattr(base_cfg, key)))
            row.update({c: "ERROR" for c in CSV_COLUMNS[4:]})
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in CSV_COLUMNS})
    text = buf.getvalue()
    if out_path is not None:
        Path(out_path).write_text(text)
    return text, rows


def _fmt(v):
    return f"{v:.2f}" if isinstance(v, float) else v


STANDARD_GRID = [
    {"config_id": f"{stage_id}_{mode_id}", "stages": stages, "embedding_mode": mode}
    for stage_id, stages in (("l2l", "l2l"), ("l2l_g2l", "l2l+g2l"), ("full", "full"))
    for mode_id, mode in (("fixed", "fixed_only"), ("learned", "learned_only"), ("concat", "concat"))
]
