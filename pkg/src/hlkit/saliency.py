"""Scoring core: cosine-similarity saliency, query broadcast over a video's
clips, the mean-squared-error saliency loss with its gradients, and
inference-time temporal pooling of clip scores.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError
from .validation import check_finite, check_vector


@dataclass
class SaliencyPrediction:
    """Predicted per-clip scores for one (video, query) pair."""

    qid: int
    vid: str
    raw: np.ndarray
    pooled: np.ndarray | None = None
    pool_radius: int = 0

    def scores(self) -> np.ndarray:
        """Pooled scores when present, raw otherwise."""
        return self.raw if self.pooled is None else self.pooled


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two embeddings, clamped to [-1, 1]
    against rounding. Zero-norm inputs are rejected: they signal an
    untrained or broken embedding, not a meaningful score."""
    a = check_vector(a, "a")
    b = check_vector(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"embedding widths differ: {a.shape[0]} vs {b.shape[0]}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm embedding is undefined")
    sim = float(np.dot(a, b)) / (norm_a * norm_b)
    return min(1.0, max(-1.0, sim))


def cosine_with_grads(a: np.ndarray, b: np.ndarray):
    """Unclamped cosine plus its gradients with respect to both embeddings.

    d sim / d a = b/(|a||b|) - sim * a/|a|^2, symmetrically for b.
    """
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm embedding is undefined")
    sim = np.dot(a, b) / (norm_a * norm_b)
    grad_a = b / (norm_a * norm_b) - sim * a / (norm_a * norm_a)
    grad_b = a / (norm_a * norm_b) - sim * b / (norm_b * norm_b)
    return float(sim), grad_a, grad_b


def score_video(frames: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Cosine score of each frame embedding against a single query embedding.

    ``frames`` is a (K, joint_dim) stack; the query is broadcast across all
    K rows. A zero-norm frame is reported with its index.
    """
    frames = np.asarray(frames)
    if frames.ndim == 1:
        frames = frames[None, :]
    if frames.shape[0] < 1:
        raise ShapeError("frame list must be nonempty")
    query = check_vector(query, "query")
    if frames.shape[1] != query.shape[0]:
        raise ShapeError(
            f"frame width {frames.shape[1]} differs from query width {query.shape[0]}"
        )
    check_finite(frames, "frames")
    norm_q = np.linalg.norm(query)
    if norm_q == 0.0:
        raise DegenerateInputError("query embedding has zero norm")
    norms = np.linalg.norm(frames, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateInputError(f"frame {int(zero[0])} has a zero-norm embedding")
    sims = frames @ query / (norms * norm_q)
    return np.clip(sims, -1.0, 1.0)


def saliency_pool(raw, radius: int) -> np.ndarray:
    """Mean over a centered window of ``2*radius + 1`` clip scores.

    Windows shrink at the boundaries (mean over the valid neighbors only);
    radius 0 returns a copy. The output is clipped to the raw range so the
    pooled scores can never escape [min(raw), max(raw)] through rounding.
    """
    raw = check_vector(np.asarray(raw, dtype=float), "raw")
    if radius < 0:
        raise ShapeError(f"radius must be >= 0, got {radius}")
    if radius == 0:
        return raw.copy()
    k = raw.shape[0]
    out = np.empty_like(raw)
    for j in range(k):
        lo = max(0, j - radius)
        hi = min(k - 1, j + radius) + 1
        out[j] = raw[lo:hi].sum() / (hi - lo)
    np.clip(out, raw.min(), raw.max(), out=out)
    return out


def saliency_loss_and_grads(pred, target):
    """Mean squared error over all stacked (video, clip) pairs and its
    gradient with respect to the predictions.

    loss = (1/M) sum (pred - target)^2, grad[p] = 2 (pred[p] - target[p]) / M.
    The caller chains ``grad`` through :func:`cosine_with_grads` and
    accumulates each query's gradient over its K frame pairs. Sums are
    accumulated in float64 so batching order cannot leak into the loss.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.ndim != 1 or target.ndim != 1:
        raise ShapeError("pred and target must be 1-D score vectors")
    if pred.shape[0] != target.shape[0]:
        raise ShapeError(
            f"pred length {pred.shape[0]} differs from target length {target.shape[0]}"
        )
    m = pred.shape[0]
    if m == 0:
        raise ShapeError("loss over an empty prediction vector is undefined")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.dot(diff, diff) / m)
    grad = (2.0 / m) * diff
    return loss, grad.astype(pred.dtype if pred.dtype.kind == "f" else np.float64)


def measure_cosine_throughput(joint_dim: int = 512, pairs: int = 100_000,
                              frames_per_video: int = 100, seed: int = 0) -> float:
    """Clip-query cosine evaluations per second on this machine, measured on
    the same :func:`score_video` kernel the evaluator uses."""
    rng = np.random.default_rng(seed)
    n_videos = max(1, pairs // frames_per_video)
    frames = [rng.normal(size=(frames_per_video, joint_dim)).astype(np.float32)
              for _ in range(n_videos)]
    queries = [rng.normal(size=joint_dim).astype(np.float32) for _ in range(n_videos)]
    start = time.perf_counter()
    for f, q in zip(frames, queries):
        score_video(f, q)
    elapsed = time.perf_counter() - start
    return n_videos * frames_per_video / elapsed
