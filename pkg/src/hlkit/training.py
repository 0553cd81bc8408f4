"""Fine-tuning loop: batch assembly with query replication, forward/backward
through both encoder tops, the saliency loss, adaptive-moment updates with
decoupled weight decay, deterministic logging, and the gradient-check harness.

One logical training thread owns the parameters and optimizer state.
Per-sequence forward/backward work inside a step may run on a worker pool;
gradients are reduced in item-index order, so serial and parallel execution
are bitwise identical.
"""

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoder import (
    ActivationSequence,
    ParamDict,
    TransformerTopConfig,
    checkpoint_save,
    encode_top_backward,
    encode_top_with_cache,
    init_params,
    zeros_like_params,
)
from .errors import ConfigError, ShapeError, TrainingAbortError
from .saliency import cosine_with_grads, saliency_loss_and_grads


def map_ordered(fn, items, workers: int = 1) -> list:
    """Apply ``fn`` to every item, preserving input order in the result.

    With ``workers > 1`` the work runs on a thread pool; results are still
    collected in input order, so downstream reductions are deterministic.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_DEFAULT_TOWER = dict(model_dim=32, num_heads=4, mlp_dim=128, num_layers=1,
                      joint_dim=16, seq_len_max=8)


def _default_vision() -> TransformerTopConfig:
    return TransformerTopConfig(causal=False, **_DEFAULT_TOWER)


def _default_text() -> TransformerTopConfig:
    return TransformerTopConfig(causal=True, **_DEFAULT_TOWER)


@dataclass
class TrainConfig:
    batch_videos: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0  # 0 disables clipping
    steps: int = 500
    seed: int = 0
    top_depth: int = 1
    pool_radius: int = 1
    vision: TransformerTopConfig = field(default_factory=_default_vision)
    text: TransformerTopConfig = field(default_factory=_default_text)

    def __post_init__(self):
        if self.batch_videos < 1:
            raise ConfigError("batch_videos must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.top_depth < 0:
            raise ConfigError("top_depth must be >= 0")
        if self.pool_radius < 0:
            raise ConfigError("pool_radius must be >= 0")
        # top_depth is the single source of truth for both towers.
        self.vision = replace(self.vision, num_layers=self.top_depth)
        self.text = replace(self.text, num_layers=self.top_depth)
        if self.vision.joint_dim != self.text.joint_dim:
            raise ConfigError(
                f"towers disagree on joint_dim: vision {self.vision.joint_dim}, "
                f"text {self.text.joint_dim}")


_SCALAR_FIELDS = {
    "batch_videos": int,
    "learning_rate": float,
    "beta1": float,
    "beta2": float,
    "eps_opt": float,
    "weight_decay": float,
    "grad_clip_norm": float,
    "steps": int,
    "seed": int,
    "top_depth": int,
    "pool_radius": int,
}
_TOWER_FIELDS = {
    "model_dim": int,
    "num_heads": int,
    "mlp_dim": int,
    "joint_dim": int,
    "seq_len_max": int,
    "causal": bool,
}


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes"):
        return True
    if lowered in ("0", "false", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def load_train_config(path) -> TrainConfig:
    """Read a flat key=value config file; '#' starts a comment.

    Unlisted keys keep their defaults. Tower keys are prefixed ``vision.`` /
    ``text.``; the block depth of both towers comes from ``top_depth``.
    """
    scalars: dict = {}
    towers: dict = {"vision": {}, "text": {}}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            key, sep, value = stripped.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key = key.strip()
            value = value.strip()
            try:
                if key in _SCALAR_FIELDS:
                    scalars[key] = _SCALAR_FIELDS[key](value)
                    continue
                side, _, tower_key = key.partition(".")
                if side in towers and tower_key in _TOWER_FIELDS:
                    kind = _TOWER_FIELDS[tower_key]
                    towers[side][tower_key] = (_parse_bool(value, key) if kind is bool
                                               else kind(value))
                    continue
            except ValueError as exc:
                raise ConfigError(f"{path}:{line_no}: bad value for {key}: {value!r}") from exc
            raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")

    top_depth = scalars.get("top_depth", TrainConfig.top_depth)
    vision_kwargs = {**_DEFAULT_TOWER, "causal": False, **towers["vision"],
                     "num_layers": top_depth}
    text_kwargs = {**_DEFAULT_TOWER, "causal": True, **towers["text"],
                   "num_layers": top_depth}
    return TrainConfig(vision=TransformerTopConfig(**vision_kwargs),
                       text=TransformerTopConfig(**text_kwargs), **scalars)


def save_train_config(path, config: TrainConfig) -> None:
    lines = []
    for key in _SCALAR_FIELDS:
        value = getattr(config, key)
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    for side in ("vision", "text"):
        tower = getattr(config, side)
        for key, kind in _TOWER_FIELDS.items():
            value = getattr(tower, key)
            lines.append(f"{side}.{key}={'true' if value else 'false'}" if kind is bool
                         else f"{side}.{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def tiny_train_config(top_depth: int = 1, seed: int = 0) -> TrainConfig:
    """A configuration small enough for coordinate-wise finite differences."""
    tower = dict(model_dim=6, num_heads=2, mlp_dim=8, num_layers=top_depth,
                 joint_dim=4, seq_len_max=4)
    return TrainConfig(
        batch_videos=2, steps=0, seed=seed, top_depth=top_depth,
        vision=TransformerTopConfig(causal=False, **tower),
        text=TransformerTopConfig(causal=True, **tower),
    )


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class TrainBatch:
    """Frame sequences stacked video-major/clip-minor, one query sequence per
    video (logically replicated over that video's clips), and the aligned
    targets."""

    frame_seqs: list
    query_seqs: list
    frame_counts: list
    targets: np.ndarray

    @property
    def num_pairs(self) -> int:
        return len(self.frame_seqs)

    def video_slices(self):
        start = 0
        for count in self.frame_counts:
            yield slice(start, start + count)
            start += count


def build_batch(items, store, targets_by_qid, query_store=None) -> TrainBatch:
    """Assemble a batch from manifest items.

    The frame axis is ordered video-major, clip-minor; query ``i`` is
    associated with exactly its own ``K_i`` frame slots. Queries come from
    ``query_store`` when the text trunk has its own store (defaults to the
    frame store).
    """
    if query_store is None:
        query_store = store
    frame_seqs = []
    query_seqs = []
    frame_counts = []
    target_parts = []
    for item in items:
        try:
            query_seqs.append(query_store.read(item.query_item))
        except KeyError:
            raise KeyError(f"query activation missing for video {item.vid!r}") from None
        for clip_index, ref in enumerate(item.frame_items):
            try:
                frame_seqs.append(store.read(ref))
            except KeyError:
                raise KeyError(
                    f"activation missing for video {item.vid!r} clip {clip_index}"
                ) from None
        frame_counts.append(len(item.frame_items))
        targets = targets_by_qid[item.qid]
        if targets.num_clips != item.num_clips:
            raise ShapeError(
                f"{item.vid}: targets cover {targets.num_clips} clips, "
                f"manifest declares {item.num_clips}")
        target_parts.append(targets.y)
    return TrainBatch(frame_seqs=frame_seqs, query_seqs=query_seqs,
                      frame_counts=frame_counts,
                      targets=np.concatenate(target_parts))


# ---------------------------------------------------------------------------
# Optimizer: adaptive moments with decoupled weight decay
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: ParamDict
    v: ParamDict
    step: int = 0


def init_optimizer(params: ParamDict) -> OptimizerState:
    return OptimizerState(m=zeros_like_params(params), v=zeros_like_params(params))


def adamw_step(params: ParamDict, grads: ParamDict, state: OptimizerState, *,
               learning_rate: float, beta1: float, beta2: float, eps: float,
               weight_decay: float) -> None:
    """One in-place update with bias-corrected moments; the decay term is
    decoupled from the adaptive step."""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        dt = p.dtype.type
        m = state.m[name]
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * g * g
        m_hat = m / dt(correction1)
        v_hat = v / dt(correction2)
        p -= dt(learning_rate) * m_hat / (np.sqrt(v_hat) + dt(eps))
        if weight_decay != 0.0:
            p -= dt(learning_rate * weight_decay) * p


def global_grad_norm(*grad_dicts) -> float:
    total = 0.0
    for grads in grad_dicts:
        for arr in grads.values():
            a = arr.astype(np.float64, copy=False)
            total += float(np.dot(a.ravel(), a.ravel()))
    return math.sqrt(total)


def clip_gradients(grad_dicts, max_norm: float, norm: float) -> None:
    if max_norm > 0 and norm > max_norm:
        for grads in grad_dicts:
            for arr in grads.values():
                arr *= arr.dtype.type(max_norm / norm)


# ---------------------------------------------------------------------------
# Loss and gradients over a batch
# ---------------------------------------------------------------------------

def batch_forward_scores(params_v, params_t, config: TrainConfig, batch: TrainBatch,
                         workers: int = 1, with_cache: bool = True):
    """Embed every frame and query and score all (frame, query) pairs."""
    def encode_v(seq):
        return encode_top_with_cache(params_v, config.vision, seq)

    def encode_t(seq):
        return encode_top_with_cache(params_t, config.text, seq)

    frame_out = map_ordered(encode_v, batch.frame_seqs, workers)
    query_out = map_ordered(encode_t, batch.query_seqs, workers)
    frame_embs = [emb for emb, _ in frame_out]
    query_embs = [emb for emb, _ in query_out]
    frame_caches = [cache for _, cache in frame_out] if with_cache else None
    query_caches = [cache for _, cache in query_out] if with_cache else None

    dtype = frame_embs[0].dtype if frame_embs else np.float64
    sims = np.empty(batch.num_pairs, dtype=dtype)
    pair_grads = [None] * batch.num_pairs
    for i, sl in enumerate(batch.video_slices()):
        q_emb = query_embs[i]
        for p in range(sl.start, sl.stop):
            sim, d_frame, d_query = cosine_with_grads(frame_embs[p], q_emb)
            sims[p] = sim
            pair_grads[p] = (d_frame, d_query)
    return sims, pair_grads, frame_caches, query_caches, frame_embs, query_embs


def loss_and_param_grads(params_v, params_t, config: TrainConfig, batch: TrainBatch,
                         workers: int = 1):
    """Saliency loss over the batch plus exact gradients for both towers.

    Each query's embedding gradient is accumulated over its K frame pairs
    before the single text-tower backward pass; reductions run in item-index
    order.
    """
    sims, pair_grads, frame_caches, query_caches, _, query_embs = \
        batch_forward_scores(params_v, params_t, config, batch, workers)
    loss, grad_pred = saliency_loss_and_grads(sims, batch.targets)

    query_emb_grads = [np.zeros_like(emb) for emb in query_embs]
    frame_emb_grads = [None] * batch.num_pairs
    for i, sl in enumerate(batch.video_slices()):
        for p in range(sl.start, sl.stop):
            d_frame, d_query = pair_grads[p]
            frame_emb_grads[p] = grad_pred[p] * d_frame
            query_emb_grads[i] += grad_pred[p] * d_query

    def backward_frame(p):
        return encode_top_backward(params_v, config.vision, batch.frame_seqs[p],
                                   frame_emb_grads[p], cache=frame_caches[p])

    def backward_query(i):
        return encode_top_backward(params_t, config.text, batch.query_seqs[i],
                                   query_emb_grads[i], cache=query_caches[i])

    frame_grads = map_ordered(backward_frame, range(batch.num_pairs), workers)
    query_grads = map_ordered(backward_query, range(len(batch.query_seqs)), workers)

    grads_v = zeros_like_params(params_v)
    for grad in frame_grads:
        for name, arr in grad.items():
            grads_v[name] += arr
    grads_t = zeros_like_params(params_t)
    for grad in query_grads:
        for name, arr in grad.items():
            grads_t[name] += arr
    return loss, grads_v, grads_t


def batch_loss(params_v, params_t, config: TrainConfig, batch: TrainBatch) -> float:
    sims, _, _, _, _, _ = batch_forward_scores(params_v, params_t, config, batch,
                                               with_cache=False)
    loss, _ = saliency_loss_and_grads(sims, batch.targets)
    return loss


# ---------------------------------------------------------------------------
# Steps and the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainStepReport:
    step: int
    loss: float
    grad_norm: float
    wall_time_ms: float


def _check_finite_grads(loss: float, named_grad_dicts) -> None:
    if not math.isfinite(loss):
        raise TrainingAbortError(f"non-finite loss {loss!r}")
    for side, grads in named_grad_dicts:
        for name, arr in grads.items():
            if not np.all(np.isfinite(arr)):
                raise TrainingAbortError("non-finite gradient", tensor=f"{side}.{name}")


def _check_finite_params(named_param_dicts) -> None:
    for side, params in named_param_dicts:
        for name, arr in params.items():
            if not np.all(np.isfinite(arr)):
                raise TrainingAbortError("non-finite parameter after update",
                                         tensor=f"{side}.{name}")


def train_step(params_v, params_t, opt_v: OptimizerState, opt_t: OptimizerState,
               batch: TrainBatch, config: TrainConfig, step: int,
               workers: int = 1) -> TrainStepReport:
    """One optimization step; parameters and optimizer states are updated in
    place (the training loop is the single writer)."""
    start = time.perf_counter()
    loss, grads_v, grads_t = loss_and_param_grads(params_v, params_t, config,
                                                  batch, workers)
    _check_finite_grads(loss, (("vision", grads_v), ("text", grads_t)))
    grad_norm = global_grad_norm(grads_v, grads_t)
    clip_gradients((grads_v, grads_t), config.grad_clip_norm, grad_norm)
    opt_kwargs = dict(learning_rate=config.learning_rate, beta1=config.beta1,
                      beta2=config.beta2, eps=config.eps_opt,
                      weight_decay=config.weight_decay)
    adamw_step(params_v, grads_v, opt_v, **opt_kwargs)
    adamw_step(params_t, grads_t, opt_t, **opt_kwargs)
    _check_finite_params((("vision", params_v), ("text", params_t)))
    wall_ms = (time.perf_counter() - start) * 1e3
    return TrainStepReport(step=step, loss=loss, grad_norm=grad_norm,
                           wall_time_ms=wall_ms)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    reports: list
    params_vision: ParamDict
    params_text: ParamDict


def derive_seeds(seed: int) -> tuple[int, int, int]:
    """(shuffle, vision init, text init) seeds, all derived from one root."""
    state = np.random.SeedSequence(seed).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def train(manifest, store, targets_by_qid, config: TrainConfig, out_dir,
          workers: int = 1, log_name: str = "train_log.jsonl",
          query_store=None, init_from=None) -> TrainResult:
    """Run the fine-tuning loop over seeded shuffled video batches.

    Emits a line-delimited log (one report per line, flushed as written),
    periodic checkpoints, and the final checkpoint. ``steps=0`` still writes
    a checkpoint holding the initial parameters. ``init_from`` warm-starts
    from a checkpoint (e.g. exported pretrained top weights) instead of the
    seeded random initialization; its shapes must match the config.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not manifest.items:
        raise ConfigError("training needs a nonempty dataset")

    shuffle_seed, vision_seed, text_seed = derive_seeds(config.seed)
    if init_from is not None:
        from .encoder import checkpoint_load  # local import, avoids cycle noise
        bundle = checkpoint_load(init_from, expect=(config.vision, config.text))
        params_v = bundle.params_vision
        params_t = bundle.params_text
    else:
        params_v = init_params(config.vision, vision_seed)
        params_t = init_params(config.text, text_seed)
    opt_v = init_optimizer(params_v)
    opt_t = init_optimizer(params_t)
    rng = np.random.default_rng(shuffle_seed)

    checkpoint_every = max(1, math.ceil(config.steps / 4)) if config.steps else 0
    log_path = out_dir / log_name
    final_path = out_dir / "checkpoint_final.hlck"
    reports: list = []

    def save(path, step):
        checkpoint_save(path, params_v, params_t, config.vision, config.text, step)

    with open(log_path, "w", encoding="utf-8") as log:
        step = 0
        order: list = []
        while step < config.steps:
            if not order:
                order = list(rng.permutation(len(manifest.items)))
            take, order = order[:config.batch_videos], order[config.batch_videos:]
            batch = build_batch([manifest.items[i] for i in take], store,
                                targets_by_qid, query_store)
            step += 1
            report = train_step(params_v, params_t, opt_v, opt_t, batch, config,
                                step, workers)
            reports.append(report)
            log.write(json.dumps({"step": report.step, "loss": report.loss,
                                  "grad_norm": report.grad_norm,
                                  "wall_time_ms": report.wall_time_ms}) + "\n")
            log.flush()
            if checkpoint_every and step % checkpoint_every == 0 and step < config.steps:
                save(out_dir / f"checkpoint_{step:06d}.hlck", step)
        save(final_path, step)
    return TrainResult(checkpoint_path=final_path, log_path=log_path,
                       reports=reports, params_vision=params_v, params_text=params_t)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

FD_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_tensor: str
    worst_index: tuple
    tolerance: float
    num_coordinates: int

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def synthetic_micro_batch(config: TrainConfig, seed: int, n_videos: int = 2,
                          clips_per_video: int = 2, dtype=np.float64) -> TrainBatch:
    """A tiny in-memory batch for gradient checking, deterministic in seed."""
    rng = np.random.default_rng(seed)
    frame_seqs = []
    query_seqs = []
    frame_counts = []
    t_v = config.vision.seq_len_max
    t_t = config.text.seq_len_max
    for i in range(n_videos):
        for j in range(clips_per_video):
            tokens = rng.normal(size=(t_v, config.vision.model_dim)).astype(dtype)
            frame_seqs.append(ActivationSequence(f"gc{i}/clip{j}", tokens, 0))
        tokens = rng.normal(size=(t_t, config.text.model_dim)).astype(dtype)
        query_seqs.append(ActivationSequence(f"gc{i}/query", tokens, t_t - 1))
        frame_counts.append(clips_per_video)
    targets = rng.uniform(0.0, 1.0, size=n_videos * clips_per_video).astype(dtype)
    return TrainBatch(frame_seqs=frame_seqs, query_seqs=query_seqs,
                      frame_counts=frame_counts, targets=targets)


def grad_check(config: TrainConfig, seed: int = 0, corrupt=None) -> GradCheckReport:
    """Compare analytic end-to-end gradients (loss through both tops) with
    64-bit central finite differences, coordinate by coordinate.

    ``corrupt`` is a test hook: ``corrupt(name, grad) -> grad`` applied to the
    analytic gradients before comparison, so an intentionally broken backward
    pass is caught and named.
    """
    _, vision_seed, text_seed = derive_seeds(seed)
    params_v = init_params(config.vision, vision_seed, dtype=np.float64)
    params_t = init_params(config.text, text_seed, dtype=np.float64)
    batch = synthetic_micro_batch(config, seed + 1)

    loss, grads_v, grads_t = loss_and_param_grads(params_v, params_t, config, batch)
    analytic = {f"vision.{n}": g for n, g in grads_v.items()}
    analytic.update({f"text.{n}": g for n, g in grads_t.items()})
    if corrupt is not None:
        analytic = {name: corrupt(name, grad) for name, grad in analytic.items()}

    worst = (0.0, "", ())
    count = 0
    for side, params in (("vision", params_v), ("text", params_t)):
        for name, arr in params.items():
            full_name = f"{side}.{name}"
            grad = analytic[full_name]
            flat = arr.ravel()
            for idx in range(flat.shape[0]):
                original = flat[idx]
                flat[idx] = original + FD_STEP
                loss_plus = batch_loss(params_v, params_t, config, batch)
                flat[idx] = original - FD_STEP
                loss_minus = batch_loss(params_v, params_t, config, batch)
                flat[idx] = original
                numeric = (loss_plus - loss_minus) / (2.0 * FD_STEP)
                a = float(grad.ravel()[idx])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                count += 1
                if rel > worst[0]:
                    worst = (rel, full_name, np.unravel_index(idx, arr.shape))
    return GradCheckReport(max_relative_error=worst[0], worst_tensor=worst[1],
                           worst_index=tuple(int(i) for i in worst[2]),
                           tolerance=GRADCHECK_TOLERANCE, num_coordinates=count)
