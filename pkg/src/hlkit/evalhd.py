"""Highlight-detection evaluation: per-annotator binarized average precision
(">= Very Good", i.e. only top-rated clips count as positives) and HIT@1,
plus the pooling-comparison harness.

Ranking everywhere is by score descending with ties broken by ascending clip
index, so results are deterministic across platforms and sort
implementations. The ranking pool for the metrics is restricted to labeled
clips; unlabeled clips carry no ratings and cannot be binarized.
"""

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import MetricError
from .saliency import SaliencyPrediction, saliency_pool, score_video
from .encoder import CheckpointBundle, encode_top
from .training import map_ordered


@dataclass
class QueryEval:
    """Per-query metric breakdown. ``ap_per_annotator`` holds ``None`` for
    annotators with no top-rated clip (average precision is undefined
    without positives, so those annotators are skipped, not scored 0)."""

    qid: int
    ap_per_annotator: list
    hit_per_annotator: list

    @property
    def ap(self):
        defined = [a for a in self.ap_per_annotator if a is not None]
        return sum(defined) / len(defined) if defined else None

    @property
    def hit(self) -> float:
        return sum(self.hit_per_annotator) / len(self.hit_per_annotator)


@dataclass
class EvalReport:
    map: float
    hit_at_1: float
    per_query: list
    pool_radius: int
    variant: str

    @property
    def n_queries(self) -> int:
        return len(self.per_query)


def average_precision(scores, positives) -> float:
    """Binary AP: rank by score descending (ties by ascending index), take
    the mean of precision-at-rank over the positives."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives)
    if scores.ndim != 1 or scores.shape != positives.shape:
        raise MetricError(
            f"scores {scores.shape} and positives {positives.shape} must be "
            "equal-length vectors")
    if scores.shape[0] < 1:
        raise MetricError("average precision needs at least one item")
    if not positives.any():
        raise MetricError("average precision is undefined with no positives")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    ranked = positives[order].astype(np.float64)
    cumulative = np.cumsum(ranked)
    ranks = np.arange(1, scores.shape[0] + 1, dtype=np.float64)
    return float((cumulative[ranked > 0] / ranks[ranked > 0]).mean())


def _labeled_view(record, score_map):
    """Scores and the rating matrix restricted to a record's labeled clips."""
    if record.qid not in score_map:
        raise MetricError(f"no prediction for qid {record.qid}")
    scores = np.asarray(score_map[record.qid], dtype=float)
    clip_ids = np.asarray(record.relevant_clip_ids, dtype=int)
    if clip_ids.size and scores.shape[0] <= clip_ids.max():
        raise MetricError(
            f"qid {record.qid}: prediction covers {scores.shape[0]} clips, "
            f"labels reference clip {int(clip_ids.max())}")
    ratings = np.asarray(record.saliency_scores, dtype=int)  # (n_labeled, A)
    return scores[clip_ids] if clip_ids.size else np.empty(0), clip_ids, ratings


def _query_eval(record, score_map) -> QueryEval:
    scores, clip_ids, ratings = _labeled_view(record, score_map)
    if clip_ids.size == 0:
        return QueryEval(qid=record.qid, ap_per_annotator=[], hit_per_annotator=[])
    order = np.lexsort((clip_ids, -scores))
    top = order[0]
    ap_per_annotator = []
    hit_per_annotator = []
    for a in range(ratings.shape[1]):
        positives = ratings[:, a] == 4
        if positives.any():
            ranked = positives[order].astype(np.float64)
            cumulative = np.cumsum(ranked)
            ranks = np.arange(1, ranked.shape[0] + 1, dtype=np.float64)
            ap_per_annotator.append(float((cumulative[ranked > 0] / ranks[ranked > 0]).mean()))
        else:
            ap_per_annotator.append(None)
        hit_per_annotator.append(int(ratings[top, a] == 4))
    return QueryEval(qid=record.qid, ap_per_annotator=ap_per_annotator,
                     hit_per_annotator=hit_per_annotator)


def query_evals(score_map, records) -> list:
    return [_query_eval(record, score_map) for record in records]


def hd_map(score_map, records) -> float:
    """mAP over queries; per query the AP is averaged over annotators that
    have at least one top-rated clip, and queries where no annotator does
    are excluded from the mean."""
    values = [qe.ap for qe in query_evals(score_map, records) if qe.ap is not None]
    if not values:
        raise MetricError("mAP is undefined: no query has a positively rated clip")
    return sum(values) / len(values)


def hit_at_1(score_map, records) -> float:
    """Fraction of queries whose top-scored labeled clip is rated 4,
    averaged per annotator first, then over all queries."""
    evals = [qe for qe in query_evals(score_map, records) if qe.hit_per_annotator]
    if not evals:
        raise MetricError("HIT@1 is undefined over zero labeled queries")
    return sum(qe.hit for qe in evals) / len(evals)


def evaluate_scores(score_map, records, pool_radius: int = 0,
                    variant: str | None = None) -> EvalReport:
    """Pool each query's raw scores with the given radius, then compute both
    metrics. Radius 0 reproduces the raw variant exactly."""
    if pool_radius > 0:
        score_map = {qid: saliency_pool(scores, pool_radius)
                     for qid, scores in score_map.items()}
    evals = query_evals(score_map, records)
    ap_values = [qe.ap for qe in evals if qe.ap is not None]
    if not ap_values:
        raise MetricError("mAP is undefined: no query has a positively rated clip")
    hit_evals = [qe for qe in evals if qe.hit_per_annotator]
    return EvalReport(
        map=sum(ap_values) / len(ap_values),
        hit_at_1=sum(qe.hit for qe in hit_evals) / len(hit_evals),
        per_query=evals,
        pool_radius=pool_radius,
        variant=variant if variant is not None else f"r={pool_radius}",
    )


# ---------------------------------------------------------------------------
# Scoring a dataset with a checkpoint
# ---------------------------------------------------------------------------

def score_dataset(bundle: CheckpointBundle, manifest, store, pool_radius: int = 0,
                  workers: int = 1, query_store=None) -> list:
    """Saliency predictions for every (video, query) item in the manifest.

    The checkpoint is read-only; per-item scoring is independent and runs on
    the worker pool, aggregated in manifest order. ``query_store`` defaults
    to the frame store.
    """
    if query_store is None:
        query_store = store

    def score_item(item) -> SaliencyPrediction:
        query_emb = encode_top(bundle.params_text, bundle.config_text,
                               query_store.read(item.query_item))
        frames = np.stack([
            encode_top(bundle.params_vision, bundle.config_vision, store.read(ref))
            for ref in item.frame_items
        ])
        raw = score_video(frames, query_emb)
        pooled = saliency_pool(raw, pool_radius) if pool_radius > 0 else None
        return SaliencyPrediction(qid=item.qid, vid=item.vid, raw=raw,
                                  pooled=pooled, pool_radius=pool_radius)

    return map_ordered(score_item, manifest.items, workers)


def predictions_to_map(predictions, pooled: bool = False) -> dict:
    """``qid -> scores`` view of a prediction list (raw scores unless
    ``pooled`` asks for the pooled variant)."""
    return {p.qid: (p.scores() if pooled else p.raw) for p in predictions}


def evaluate(bundle: CheckpointBundle, manifest, store, records,
             pool_radius: int = 0, workers: int = 1, query_store=None) -> EvalReport:
    """Score every (video, query) pair with the checkpoint, pool with the
    given radius, and compute the highlight-detection metrics."""
    predictions = score_dataset(bundle, manifest, store, pool_radius=0,
                                workers=workers, query_store=query_store)
    return evaluate_scores(predictions_to_map(predictions), records,
                           pool_radius=pool_radius)


def compare_pooling_scores(score_map, records, radii) -> list:
    """One report per pooling radius over a fixed set of raw scores."""
    radii = list(radii)
    if not radii:
        raise MetricError("compare_pooling needs at least one radius")
    return [evaluate_scores(score_map, records, pool_radius=r, variant=f"r={r}")
            for r in radii]


def compare_pooling(bundle: CheckpointBundle, manifest, store, records, radii,
                    workers: int = 1, query_store=None) -> list:
    """Score once, then evaluate under every pooling radius."""
    predictions = score_dataset(bundle, manifest, store, pool_radius=0,
                                workers=workers, query_store=query_store)
    return compare_pooling_scores(predictions_to_map(predictions), records, radii)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def report_to_doc(report: EvalReport) -> dict:
    return {
        "variant": report.variant,
        "pool_radius": report.pool_radius,
        "n_queries": report.n_queries,
        "map": report.map,
        "hit_at_1": report.hit_at_1,
        "map_x100": 100.0 * report.map,
        "hit_at_1_x100": 100.0 * report.hit_at_1,
        "per_query": [
            {
                "qid": qe.qid,
                "ap": qe.ap,
                "hit": qe.hit if qe.hit_per_annotator else None,
                "ap_per_annotator": qe.ap_per_annotator,
                "hit_per_annotator": qe.hit_per_annotator,
            }
            for qe in report.per_query
        ],
    }


def write_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_doc(report), fh, indent=2)
        fh.write("\n")


def write_pooling_csv(path, reports) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "pool_radius", "map", "hit_at_1",
                         "map_x100", "hit_at_1_x100"])
        for report in reports:
            writer.writerow([report.variant, report.pool_radius,
                             repr(report.map), repr(report.hit_at_1),
                             repr(100.0 * report.map), repr(100.0 * report.hit_at_1)])


def format_pooling_table(reports) -> str:
    header = f"{'variant':<10}{'mAP':>10}{'HIT@1':>10}"
    rows = [header, "-" * len(header)]
    for report in reports:
        rows.append(f"{report.variant:<10}{100 * report.map:>10.2f}"
                    f"{100 * report.hit_at_1:>10.2f}")
    return "\n".join(rows)
