"""Export orchestration: videos + annotations -> engine-format dataset.

For every 2-second clip the center frame's trunk token states are written
(class token at pool position 0); for every query the trunk token states of
the tokenized text (pooled at the end-of-text position). The pretrained
weights of the trainable top (the last ``cut_depth`` blocks, final norm and
projection of both towers) are dumped as an engine checkpoint so fine-tuning
can warm-start from them. Per-item failures (undecodable video, overlong
query) are recorded and the export continues.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from hlkit.data import (
    DatasetManifest,
    HighlightDataset,
    ManifestItem,
    load_annotations,
    save_annotations,
    save_manifest,
    write_activation_file,
)
from hlkit.encoder import ActivationSequence, checkpoint_load, checkpoint_save
from hlkit.errors import HlkitError
from hlkit.evalhd import predictions_to_map, score_dataset

from .trunk import (
    DualEncoder,
    TrunkError,
    load_dual_encoder,
    text_trunk_tokens,
    top_params,
    tower_configs,
    vision_trunk_tokens,
)
from .video import VideoDecodeError, sample_center_frames

FRAMES_FILE = "frames.hlca"
QUERIES_FILE = "queries.hlca"
CHECKPOINT_FILE = "pretrained_top.hlck"


@dataclass
class ExportSpec:
    """What to export: videos, their annotations, and where to cut the trunk.

    ``cut_depth`` must equal the engine config's top depth. Sampling takes
    one center frame per ``clip_len`` seconds.
    """

    videos: list  # of {"path": ..., "vid": ...}
    annotations: str
    cut_depth: int
    out_dir: str
    weights: str
    clip_len: float = 2.0

    @classmethod
    def from_json(cls, path, **overrides) -> "ExportSpec":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        doc.update(overrides)
        return cls(**doc)


@dataclass
class ExportFailure:
    kind: str  # "video" | "query" | "record"
    item: str
    reason: str


@dataclass
class ExportResult:
    out_dir: Path
    n_videos: int
    n_queries: int
    n_clips: int
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"exported {self.n_videos} videos ({self.n_clips} clips), "
                 f"{self.n_queries} queries to {self.out_dir}"]
        for failure in self.failures:
            lines.append(f"  FAILED {failure.kind} {failure.item}: {failure.reason}")
        return "\n".join(lines)


def export_activations(spec: ExportSpec, encoder: DualEncoder | None = None) -> ExportResult:
    """Run the frozen trunks and write the engine-format dataset.

    Deterministic for fixed inputs; failures are per-item and non-fatal.
    """
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if encoder is None:
        encoder = load_dual_encoder(spec.weights)
    config_vision, config_text = tower_configs(encoder, spec.cut_depth)

    records = load_annotations(spec.annotations)
    failures: list = []
    paths_by_vid = {}
    for entry in spec.videos:
        vid = entry["vid"]
        if vid in paths_by_vid:
            raise HlkitError(f"video id {vid!r} listed twice")
        paths_by_vid[vid] = Path(entry["path"])

    # one decode + trunk run per unique video
    frame_sequences = []
    frame_items_by_vid = {}
    for vid, path in paths_by_vid.items():
        durations = {r.duration for r in records if r.vid == vid}
        clip_lens = {r.clip_len for r in records if r.vid == vid}
        if len(durations) > 1 or len(clip_lens) > 1:
            failures.append(ExportFailure("video", vid,
                                          "annotation records disagree on duration"))
            continue
        clip_len = clip_lens.pop() if clip_lens else spec.clip_len
        try:
            if durations:
                duration = durations.pop()
            else:
                from .video import probe_duration
                duration = probe_duration(path)
            frames = sample_center_frames(path, duration, clip_len)
            tokens = vision_trunk_tokens(encoder, frames, spec.cut_depth)
        except (VideoDecodeError, OSError) as exc:
            failures.append(ExportFailure("video", vid, str(exc)))
            continue
        items = []
        for j in range(tokens.shape[0]):
            item_id = f"{vid}/clip{j:03d}"
            frame_sequences.append(ActivationSequence(item_id, tokens[j], 0))
            items.append(item_id)
        frame_items_by_vid[vid] = items

    # one trunk run per query
    query_sequences = []
    manifest_items = []
    exported_records = []
    for record in records:
        if record.vid not in paths_by_vid:
            failures.append(ExportFailure("record", f"qid {record.qid}",
                                          f"no video listed for vid {record.vid!r}"))
            continue
        if record.vid not in frame_items_by_vid:
            failures.append(ExportFailure("record", f"qid {record.qid}",
                                          f"video {record.vid!r} failed to export"))
            continue
        try:
            tokens, pool_index = text_trunk_tokens(encoder, record.query,
                                                   spec.cut_depth)
        except TrunkError as exc:
            failures.append(ExportFailure("query", f"qid {record.qid}", str(exc)))
            continue
        item_id = f"q{record.qid:05d}"
        query_sequences.append(ActivationSequence(item_id, tokens, pool_index))
        frame_items = frame_items_by_vid[record.vid]
        expected = math.ceil(record.duration / record.clip_len)
        if len(frame_items) != expected:
            failures.append(ExportFailure("record", f"qid {record.qid}",
                                          f"{len(frame_items)} clips exported, "
                                          f"annotation implies {expected}"))
            continue
        manifest_items.append(ManifestItem(
            qid=record.qid, vid=record.vid, num_clips=len(frame_items),
            query_item=item_id, frame_items=list(frame_items)))
        exported_records.append(record)

    manifest = DatasetManifest(
        model_dim=config_vision.model_dim,
        activation_files=[FRAMES_FILE] if frame_sequences else [],
        items=manifest_items,
        text_activation_files=[QUERIES_FILE] if query_sequences else None,
        text_model_dim=config_text.model_dim if query_sequences else None,
        meta={
            "source": "dual-encoder-export",
            "cut_depth": spec.cut_depth,
            "clip_len": spec.clip_len,
            "frame_sampling": "center frame of each clip",
            "image_size": encoder.model.config.vision_config.image_size,
            "preprocessing": "shortest-edge resize, center crop, per-channel normalize",
            "joint_dim": config_vision.joint_dim,
        },
    )
    if frame_sequences:
        write_activation_file(out_dir / FRAMES_FILE, frame_sequences)
    if query_sequences:
        write_activation_file(out_dir / QUERIES_FILE, query_sequences)
    save_manifest(out_dir / "manifest.json", manifest)
    save_annotations(out_dir / "annotations.jsonl", exported_records)

    params_vision, params_text = top_params(encoder, spec.cut_depth)
    checkpoint_save(out_dir / CHECKPOINT_FILE, params_vision, params_text,
                    config_vision, config_text, step=0)

    return ExportResult(out_dir=out_dir,
                        n_videos=len(frame_items_by_vid),
                        n_queries=len(query_sequences),
                        n_clips=len(frame_sequences),
                        failures=failures)


def check_export(data_dir, checkpoint_name: str = CHECKPOINT_FILE) -> list:
    """Re-read an exported dataset with the engine's own readers and verify
    consistency. Returns a list of problems; empty means the export passes."""
    data_dir = Path(data_dir)
    problems: list = []
    try:
        dataset = HighlightDataset.open(data_dir)
    except Exception as exc:
        return [f"dataset failed to open: {exc}"]
    for store in {id(dataset.store): dataset.store,
                  id(dataset.query_store): dataset.query_store}.values():
        for item_id in store.ids():
            try:
                store.read(item_id)
            except Exception as exc:
                problems.append(f"activation {item_id!r} unreadable: {exc}")

    checkpoint_path = data_dir / checkpoint_name
    if checkpoint_path.exists():
        try:
            bundle = checkpoint_load(checkpoint_path)
        except Exception as exc:
            problems.append(f"checkpoint unreadable: {exc}")
        else:
            if bundle.config_vision.model_dim != dataset.store.model_dim:
                problems.append(
                    f"checkpoint vision width {bundle.config_vision.model_dim} "
                    f"!= frame store width {dataset.store.model_dim}")
            if bundle.config_text.model_dim != dataset.query_store.model_dim:
                problems.append(
                    f"checkpoint text width {bundle.config_text.model_dim} "
                    f"!= query store width {dataset.query_store.model_dim}")
            cut_depth = dataset.manifest.meta.get("cut_depth")
            if cut_depth is not None and bundle.config_vision.num_layers != cut_depth:
                problems.append(
                    f"checkpoint depth {bundle.config_vision.num_layers} "
                    f"!= manifest cut_depth {cut_depth}")
    else:
        problems.append(f"missing checkpoint {checkpoint_name}")
    return problems


def zero_shot_scores(data_dir, checkpoint_name: str = CHECKPOINT_FILE):
    """Engine-side zero-shot cosine scores with the exported pretrained top.

    Returns (mean score over query-relevant clips, mean score over all
    clips); a pretrained encoder should put the first above the second.
    """
    data_dir = Path(data_dir)
    dataset = HighlightDataset.open(data_dir)
    bundle = checkpoint_load(data_dir / checkpoint_name)
    predictions = score_dataset(bundle, dataset.manifest, dataset.store,
                                query_store=dataset.query_store)
    score_map = predictions_to_map(predictions)
    relevant = []
    everything = []
    for record in dataset.records:
        scores = score_map[record.qid]
        everything.extend(float(s) for s in scores)
        relevant.extend(float(scores[j]) for j in record.relevant_clip_ids)
    if not relevant:
        raise HlkitError("fixture has no relevant clips to compare against")
    return sum(relevant) / len(relevant), sum(everything) / len(everything)
