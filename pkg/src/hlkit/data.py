"""Dataset model and I/O.

Covers the benchmark-format annotation files (line-delimited JSON, one record
per line, field names matching the public highlight-detection release so real
data loads unmodified), Likert-rating normalization and per-clip regression
targets, the binary activation store that holds the frozen-trunk token states,
the dataset manifest tying the two together, and a synthetic generator for
desk-scale runs.
"""

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import ActivationSequence
from .errors import (
    AnnotationError,
    BadMagicError,
    BadVersionError,
    ConfigError,
    CorruptHeaderError,
    DuplicateItemError,
    ShapeError,
    TruncatedFileError,
)

CLIP_SECONDS_DEFAULT = 2.0
RATING_MAX = 4


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

@dataclass
class AnnotationRecord:
    """One (video, query) annotation: which clips were rated, and how.

    ``saliency_scores[i]`` holds the per-annotator integer ratings (0..4) for
    clip ``relevant_clip_ids[i]``. Clips absent from ``relevant_clip_ids``
    carry no ratings.
    """

    qid: int
    query: str
    vid: str
    duration: float
    relevant_clip_ids: list
    saliency_scores: list
    clip_len: float = CLIP_SECONDS_DEFAULT

    @property
    def num_clips(self) -> int:
        return math.ceil(self.duration / self.clip_len)

    @property
    def annotator_count(self) -> int:
        return len(self.saliency_scores[0]) if self.saliency_scores else 0

    def validate(self, line: int | None = None) -> "AnnotationRecord":
        if self.duration <= 0:
            raise AnnotationError(f"duration must be positive, got {self.duration}",
                                  line, "duration")
        if self.clip_len <= 0:
            raise AnnotationError(f"clip_len must be positive, got {self.clip_len}",
                                  line, "clip_len")
        if len(self.saliency_scores) != len(self.relevant_clip_ids):
            raise AnnotationError(
                f"{len(self.saliency_scores)} rating lists for "
                f"{len(self.relevant_clip_ids)} relevant clips",
                line, "saliency_scores")
        k = self.num_clips
        seen = set()
        for clip_id in self.relevant_clip_ids:
            if not isinstance(clip_id, int) or isinstance(clip_id, bool):
                raise AnnotationError(f"clip id {clip_id!r} is not an integer",
                                      line, "relevant_clip_ids")
            if not 0 <= clip_id < k:
                raise AnnotationError(
                    f"clip id {clip_id} out of range for {k} clips "
                    f"(duration {self.duration}, clip_len {self.clip_len})",
                    line, "relevant_clip_ids")
            if clip_id in seen:
                raise AnnotationError(f"clip id {clip_id} listed twice",
                                      line, "relevant_clip_ids")
            seen.add(clip_id)
        annotators = None
        for ratings in self.saliency_scores:
            if not isinstance(ratings, list) or not ratings:
                raise AnnotationError("each clip needs a nonempty rating list",
                                      line, "saliency_scores")
            if annotators is None:
                annotators = len(ratings)
            elif len(ratings) != annotators:
                raise AnnotationError(
                    f"inconsistent annotator counts ({annotators} vs {len(ratings)})",
                    line, "saliency_scores")
            for rating in ratings:
                if not isinstance(rating, int) or isinstance(rating, bool) \
                        or not 0 <= rating <= RATING_MAX:
                    raise AnnotationError(
                        f"rating {rating!r} outside 0..{RATING_MAX}",
                        line, "saliency_scores")
        return self


def load_annotations(path) -> list:
    """Parse a line-delimited annotation file, attaching line numbers to all
    errors. Unknown fields are ignored so real benchmark releases load as-is."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"malformed record: {exc.msg}", line_no) from exc
            if not isinstance(obj, dict):
                raise AnnotationError("record is not an object", line_no)
            for key, kind in (("qid", int), ("query", str), ("vid", str),
                              ("duration", (int, float)),
                              ("relevant_clip_ids", list), ("saliency_scores", list)):
                if key not in obj:
                    raise AnnotationError("missing field", line_no, key)
                if not isinstance(obj[key], kind):
                    raise AnnotationError(f"expected {kind}, got {type(obj[key]).__name__}",
                                          line_no, key)
            record = AnnotationRecord(
                qid=obj["qid"],
                query=obj["query"],
                vid=obj["vid"],
                duration=float(obj["duration"]),
                relevant_clip_ids=list(obj["relevant_clip_ids"]),
                saliency_scores=[list(r) if isinstance(r, list) else r
                                 for r in obj["saliency_scores"]],
                clip_len=float(obj.get("clip_len", CLIP_SECONDS_DEFAULT)),
            )
            records.append(record.validate(line_no))
    return records


def save_annotations(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps({
                "qid": record.qid,
                "query": record.query,
                "vid": record.vid,
                "duration": record.duration,
                "clip_len": record.clip_len,
                "relevant_clip_ids": record.relevant_clip_ids,
                "saliency_scores": record.saliency_scores,
            }) + "\n")


def normalize_rating(rating: int) -> float:
    """Map the five-point scale (0 "Very Bad" .. 4 "Very Good") linearly
    onto [0, 1]."""
    if not isinstance(rating, int) or isinstance(rating, bool) \
            or not 0 <= rating <= RATING_MAX:
        raise AnnotationError(f"rating {rating!r} outside 0..{RATING_MAX}",
                              field="saliency_scores")
    return rating / RATING_MAX


@dataclass
class SaliencyTargets:
    """Per-clip regression targets in [0, 1] for one (video, query) pair."""

    qid: int
    y: np.ndarray

    @property
    def num_clips(self) -> int:
        return self.y.shape[0]


def build_targets(record: AnnotationRecord) -> SaliencyTargets:
    """Targets from one record: each rated clip gets the mean normalized
    rating over its annotators, every unrated clip gets exactly 0 ("Very
    Bad")."""
    y = np.zeros(record.num_clips, dtype=np.float64)
    for clip_id, ratings in zip(record.relevant_clip_ids, record.saliency_scores):
        y[clip_id] = sum(normalize_rating(r) for r in ratings) / len(ratings)
    return SaliencyTargets(qid=record.qid, y=y)


# ---------------------------------------------------------------------------
# Activation file format "HLCA"
#
#   magic "HLCA" | version u32 LE | header byte length u32 LE |
#   UTF-8 header (key=value lines) | float32 LE token payloads
#
# Header keys: model_dim, and one "item=<id>:<num_tokens>:<pool_index>:<offset>"
# line per sequence, in payload order. Offsets are relative to the start of
# the payload.
# ---------------------------------------------------------------------------

ACTIVATION_MAGIC = b"HLCA"
ACTIVATION_VERSION = 1


def write_activation_file(path, sequences) -> None:
    """Write sequences (all sharing one model width) to a single file.

    Duplicate item ids are rejected before any bytes are written.
    """
    sequences = list(sequences)
    if not sequences:
        raise ShapeError("refusing to write an activation file with no sequences")
    model_dim = sequences[0].tokens.shape[1]
    seen = set()
    for seq in sequences:
        if seq.item_id in seen:
            raise DuplicateItemError(f"duplicate item id {seq.item_id!r}")
        seen.add(seq.item_id)
        if seq.tokens.shape[1] != model_dim:
            raise ShapeError(
                f"sequence {seq.item_id!r} has width {seq.tokens.shape[1]}, "
                f"file is {model_dim}-wide"
            )

    lines = [f"model_dim={model_dim}"]
    payload = io.BytesIO()
    offset = 0
    for seq in sequences:
        tokens = np.ascontiguousarray(seq.tokens, dtype="<f4")
        lines.append(f"item={seq.item_id}:{seq.num_tokens}:{seq.pool_index}:{offset}")
        payload.write(tokens.tobytes())
        offset += tokens.nbytes
    header = ("\n".join(lines) + "\n").encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(ACTIVATION_MAGIC)
        fh.write(struct.pack("<I", ACTIVATION_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


@dataclass
class _StoreEntry:
    path: Path
    num_tokens: int
    pool_index: int
    offset: int  # absolute file offset of this item's payload


class ActivationStore:
    """Random access to activation sequences by item id.

    Only the header directory of each file is read up front; token payloads
    are fetched on demand, so a store over a large file stays cheap to open.
    Stores are immutable after open and safe for concurrent readers.
    """

    def __init__(self, model_dim: int, entries: dict):
        self.model_dim = model_dim
        self._entries = entries
        self._handles: dict = {}

    @classmethod
    def open(cls, *paths) -> "ActivationStore":
        model_dim = None
        entries: dict = {}
        for path in paths:
            path = Path(path)
            dim, directory = _read_activation_directory(path)
            if model_dim is None:
                model_dim = dim
            elif dim != model_dim:
                raise CorruptHeaderError(
                    f"{path}: model_dim {dim} conflicts with {model_dim} from earlier files"
                )
            for item_id, entry in directory.items():
                if item_id in entries:
                    raise DuplicateItemError(
                        f"{path}: item {item_id!r} already provided by another file"
                    )
                entries[item_id] = entry
        if model_dim is None:
            raise ShapeError("an activation store needs at least one file")
        return cls(model_dim, entries)

    def ids(self) -> list:
        return list(self._entries)

    def max_num_tokens(self) -> int:
        return max(entry.num_tokens for entry in self._entries.values())

    def __contains__(self, item_id) -> bool:
        return item_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def read(self, item_id: str) -> ActivationSequence:
        try:
            entry = self._entries[item_id]
        except KeyError:
            raise KeyError(f"activation store has no item {item_id!r}") from None
        fh = self._handles.get(entry.path)
        if fh is None:
            fh = open(entry.path, "rb")
            self._handles[entry.path] = fh
        nbytes = entry.num_tokens * self.model_dim * 4
        fh.seek(entry.offset)
        blob = fh.read(nbytes)
        if len(blob) != nbytes:
            raise TruncatedFileError(
                f"{entry.path}: payload of item {item_id!r} extends past end of file"
            )
        tokens = np.frombuffer(blob, dtype="<f4").reshape(entry.num_tokens, self.model_dim)
        return ActivationSequence(item_id=item_id, tokens=tokens.copy(),
                                  pool_index=entry.pool_index)

    def close(self) -> None:
        for fh in self._handles.values():
            fh.close()
        self._handles.clear()

    def __enter__(self) -> "ActivationStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class InMemoryStore:
    """Dict-backed stand-in for :class:`ActivationStore`.

    Used to pin a whole desk-scale dataset in memory (the training loop reads
    every sequence on every step) and to build fixtures in tests.
    """

    def __init__(self, sequences):
        seqs = list(sequences)
        if not seqs:
            raise ShapeError("an in-memory store needs at least one sequence")
        self.model_dim = seqs[0].tokens.shape[1]
        self._items: dict = {}
        for seq in seqs:
            if seq.item_id in self._items:
                raise DuplicateItemError(f"duplicate item id {seq.item_id!r}")
            if seq.tokens.shape[1] != self.model_dim:
                raise ShapeError(
                    f"sequence {seq.item_id!r} has width {seq.tokens.shape[1]}, "
                    f"store is {self.model_dim}-wide")
            self._items[seq.item_id] = seq

    @classmethod
    def from_store(cls, store, ids=None) -> "InMemoryStore":
        return cls(store.read(item_id) for item_id in (ids if ids is not None else store.ids()))

    def ids(self) -> list:
        return list(self._items)

    def max_num_tokens(self) -> int:
        return max(seq.num_tokens for seq in self._items.values())

    def __contains__(self, item_id) -> bool:
        return item_id in self._items

    def __len__(self) -> int:
        return len(self._items)

    def read(self, item_id: str) -> ActivationSequence:
        try:
            return self._items[item_id]
        except KeyError:
            raise KeyError(f"activation store has no item {item_id!r}") from None


def _read_activation_directory(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise TruncatedFileError(f"{path}: too short to hold an activation header")
        if head[:4] != ACTIVATION_MAGIC:
            raise BadMagicError(f"{path}: bad magic {head[:4]!r}, expected {ACTIVATION_MAGIC!r}")
        version = struct.unpack("<I", head[4:8])[0]
        if version != ACTIVATION_VERSION:
            raise BadVersionError(f"{path}: unsupported activation version {version}")
        header_len = struct.unpack("<I", head[8:12])[0]
        header_blob = fh.read(header_len)
        if len(header_blob) != header_len:
            raise TruncatedFileError(f"{path}: header truncated")
        try:
            header = header_blob.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptHeaderError(f"{path}: header is not valid UTF-8") from exc
        payload_start = 12 + header_len
        fh.seek(0, 2)
        file_len = fh.tell()

    model_dim = None
    directory: dict = {}
    for line in header.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptHeaderError(f"{path}: malformed header line {line!r}")
        if key == "model_dim":
            model_dim = int(value)
        elif key == "item":
            parts = value.rsplit(":", 3)
            try:
                item_id = parts[0]
                num_tokens, pool_index, offset = (int(parts[1]), int(parts[2]),
                                                  int(parts[3]))
            except (IndexError, ValueError) as exc:
                raise CorruptHeaderError(f"{path}: malformed item entry {value!r}") from exc
            if item_id in directory:
                raise CorruptHeaderError(f"{path}: duplicate item {item_id!r}")
            directory[item_id] = _StoreEntry(
                path=path, num_tokens=num_tokens, pool_index=pool_index,
                offset=payload_start + offset)
        else:
            raise CorruptHeaderError(f"{path}: unknown header key {key!r}")
    if model_dim is None or model_dim < 1:
        raise CorruptHeaderError(f"{path}: header does not declare a valid model_dim")

    for item_id, entry in directory.items():
        if entry.num_tokens < 1:
            raise CorruptHeaderError(f"{path}: item {item_id!r} declares no tokens")
        if not 0 <= entry.pool_index < entry.num_tokens:
            raise CorruptHeaderError(
                f"{path}: item {item_id!r} has pool_index {entry.pool_index} "
                f"outside its {entry.num_tokens} tokens")
        end = entry.offset + entry.num_tokens * model_dim * 4
        if entry.offset < payload_start or end > file_len:
            raise CorruptHeaderError(
                f"{path}: item {item_id!r} declares an offset past end of file")
    return model_dim, directory


# ---------------------------------------------------------------------------
# Prediction files: line-delimited, one (video, query) pair per line with
# qid, vid, and the K predicted per-clip scores.
# ---------------------------------------------------------------------------

def write_predictions(path, predictions) -> None:
    from .saliency import SaliencyPrediction  # local import to stay cycle-free

    with open(path, "w", encoding="utf-8") as fh:
        for pred in predictions:
            if not isinstance(pred, SaliencyPrediction):
                raise ShapeError(f"expected SaliencyPrediction, got {type(pred).__name__}")
            fh.write(json.dumps({
                "qid": pred.qid,
                "vid": pred.vid,
                "pred_saliency_scores": [float(s) for s in pred.scores()],
            }) + "\n")


def load_predictions(path) -> list:
    from .saliency import SaliencyPrediction

    predictions = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"malformed prediction: {exc.msg}", line_no) from exc
            for key in ("qid", "vid", "pred_saliency_scores"):
                if key not in obj:
                    raise AnnotationError("missing field", line_no, key)
            if obj["qid"] in seen:
                raise AnnotationError(f"duplicate qid {obj['qid']}", line_no, "qid")
            seen.add(obj["qid"])
            scores = np.asarray(obj["pred_saliency_scores"], dtype=np.float64)
            if scores.ndim != 1 or scores.shape[0] < 1:
                raise AnnotationError("scores must be a nonempty flat list",
                                      line_no, "pred_saliency_scores")
            predictions.append(SaliencyPrediction(qid=obj["qid"], vid=obj["vid"],
                                                  raw=scores))
    return predictions


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestItem:
    qid: int
    vid: str
    num_clips: int
    query_item: str
    frame_items: list


@dataclass
class DatasetManifest:
    """Ties annotation records to their activation sequences.

    The two encoder trunks may have different widths, in which case query
    activations live in their own files: ``text_activation_files`` /
    ``text_model_dim`` are set and the frame fields describe the vision side
    only. When absent, one shared store holds both.
    """

    model_dim: int
    activation_files: list
    items: list
    meta: dict = field(default_factory=dict)
    text_activation_files: list | None = None
    text_model_dim: int | None = None

    def __len__(self) -> int:
        return len(self.items)

    @property
    def split_stores(self) -> bool:
        return self.text_activation_files is not None


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "model_dim": manifest.model_dim,
        "activation_files": manifest.activation_files,
        "meta": manifest.meta,
        "items": [
            {
                "qid": item.qid,
                "vid": item.vid,
                "num_clips": item.num_clips,
                "query_item": item.query_item,
                "frame_items": item.frame_items,
            }
            for item in manifest.items
        ],
    }
    if manifest.split_stores:
        doc["text_activation_files"] = manifest.text_activation_files
        doc["text_model_dim"] = manifest.text_model_dim
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed manifest: {exc.msg}") from exc
    try:
        items = [ManifestItem(qid=i["qid"], vid=i["vid"], num_clips=i["num_clips"],
                              query_item=i["query_item"], frame_items=list(i["frame_items"]))
                 for i in doc["items"]]
        text_files = doc.get("text_activation_files")
        manifest = DatasetManifest(model_dim=doc["model_dim"],
                                   activation_files=list(doc["activation_files"]),
                                   items=items, meta=dict(doc.get("meta", {})),
                                   text_activation_files=(list(text_files)
                                                          if text_files is not None
                                                          else None),
                                   text_model_dim=doc.get("text_model_dim"))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: manifest is missing required fields: {exc}") from exc
    return manifest


def validate_manifest(manifest: DatasetManifest, store, query_store=None) -> None:
    """Check that every referenced activation exists with the declared shape."""
    if query_store is None:
        query_store = store
    if store.model_dim != manifest.model_dim:
        raise ShapeError(
            f"manifest declares model_dim {manifest.model_dim}, "
            f"store holds {store.model_dim}")
    if manifest.split_stores and query_store.model_dim != manifest.text_model_dim:
        raise ShapeError(
            f"manifest declares text_model_dim {manifest.text_model_dim}, "
            f"query store holds {query_store.model_dim}")
    for item in manifest.items:
        if len(item.frame_items) != item.num_clips:
            raise ShapeError(
                f"{item.vid}: manifest lists {len(item.frame_items)} frame items "
                f"for {item.num_clips} clips")
        if item.query_item not in query_store:
            raise ShapeError(
                f"{item.vid}: activation {item.query_item!r} is missing from the store")
        for ref in item.frame_items:
            if ref not in store:
                raise ShapeError(f"{item.vid}: activation {ref!r} is missing from the store")


@dataclass
class HighlightDataset:
    """Manifest, activation store(s), and annotations for one split.

    ``query_store`` is the frame store itself unless the manifest declares
    separate text-side activation files (dual trunks of different widths).
    """

    manifest: DatasetManifest
    store: ActivationStore
    records: list
    query_store: ActivationStore = None

    def __post_init__(self):
        if self.query_store is None:
            self.query_store = self.store

    @classmethod
    def open(cls, data_dir) -> "HighlightDataset":
        data_dir = Path(data_dir)
        manifest = load_manifest(data_dir / "manifest.json")
        store = ActivationStore.open(
            *[data_dir / name for name in manifest.activation_files])
        query_store = store
        if manifest.split_stores:
            query_store = ActivationStore.open(
                *[data_dir / name for name in manifest.text_activation_files])
        validate_manifest(manifest, store, query_store)
        records = load_annotations(data_dir / "annotations.jsonl")
        by_qid = {r.qid: r for r in records}
        for item in manifest.items:
            if item.qid not in by_qid:
                raise ConfigError(f"manifest item qid {item.qid} has no annotation record")
        return cls(manifest=manifest, store=store, records=records,
                   query_store=query_store)

    def targets_by_qid(self) -> dict:
        return {record.qid: build_targets(record) for record in self.records}


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Desk-scale stand-in for a frozen encoder trunk over a real dataset.

    For every (video, query) pair a unit latent direction is drawn. Query
    tokens always carry their latent direction; tokens of clips designated
    salient carry a component aligned with it, scaled by
    ``planted_correlation`` (0 means labels are independent of activations,
    the negative control).
    """

    n_videos: int = 8
    clips_per_video: int = 16
    tokens_per_item: int = 8
    model_dim: int = 32
    joint_dim: int = 16
    seed: int = 0
    planted_correlation: float = 1.0

    def validate(self) -> "SyntheticSpec":
        if self.n_videos < 1 or self.clips_per_video < 1:
            raise ConfigError("n_videos and clips_per_video must be >= 1")
        if self.tokens_per_item < 1 or self.model_dim < 1 or self.joint_dim < 1:
            raise ConfigError("tokens_per_item, model_dim and joint_dim must be >= 1")
        if not 0.0 <= self.planted_correlation <= 1.0:
            raise ConfigError(
                f"planted_correlation must lie in [0, 1], got {self.planted_correlation}")
        return self

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: malformed spec: {exc.msg}") from exc
        unknown = set(doc) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"{path}: unknown spec fields {sorted(unknown)}")
        return cls(**doc).validate()


# Adjacent clips of a real video are highly similar, so every clip of a video
# shares one base token pattern and differs only by small per-clip noise.
# Besides realism this keeps the planted_correlation=0 control honest: with
# near-identical inputs, memorizing arbitrary labels is much slower than
# learning the planted direction, so training on the null dataset stays near
# chance within the desk-scale step budget.
_VIDEO_BASE_SCALE = 1.0
_CLIP_NOISE_SCALE = 0.02
_PLANT_SCALE_SALIENT = 2.5
_PLANT_SCALE_NEAR_MISS = 1.25
_QUERY_NOISE_SCALE = 0.25
_ANNOTATORS = 3


@dataclass
class SyntheticResult:
    data_dir: Path
    manifest: DatasetManifest
    latents: dict  # qid -> unit latent direction (test oracle input)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticResult:
    """Write a synthetic dataset (activations, manifest, annotations) into
    ``out_dir``. Deterministic in ``spec.seed``, byte for byte."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    sequences = []
    records = []
    items = []
    latents: dict = {}
    c = spec.planted_correlation
    for i in range(spec.n_videos):
        qid = i
        vid = f"synth{i:04d}"
        k = spec.clips_per_video

        direction = rng.normal(size=spec.model_dim)
        direction /= np.linalg.norm(direction)
        latents[qid] = direction

        span_len = min(int(rng.integers(2, 9)), k)
        start = int(rng.integers(0, k - span_len + 1))
        salient = list(range(start, start + span_len))
        near_miss = [j for j in (start - 1, start + span_len) if 0 <= j < k]

        base = rng.normal(size=(spec.tokens_per_item, spec.model_dim)) * _VIDEO_BASE_SCALE
        noise = rng.normal(size=(k, spec.tokens_per_item, spec.model_dim)) * _CLIP_NOISE_SCALE
        query_noise = rng.normal(size=(spec.tokens_per_item, spec.model_dim))

        frame_items = []
        for j in range(k):
            tokens = base + noise[j]
            if j in salient:
                tokens += c * _PLANT_SCALE_SALIENT * direction
            elif j in near_miss:
                tokens += c * _PLANT_SCALE_NEAR_MISS * direction
            item_id = f"{vid}/clip{j:03d}"
            frame_items.append(item_id)
            sequences.append(ActivationSequence(
                item_id=item_id, tokens=tokens.astype(np.float32), pool_index=0))

        query_tokens = query_noise * _QUERY_NOISE_SCALE + direction
        query_item = f"{vid}/query"
        sequences.append(ActivationSequence(
            item_id=query_item, tokens=query_tokens.astype(np.float32),
            pool_index=spec.tokens_per_item - 1))

        labeled = sorted(near_miss + salient)
        records.append(AnnotationRecord(
            qid=qid,
            query=f"synthetic highlight query {qid}",
            vid=vid,
            duration=k * CLIP_SECONDS_DEFAULT,
            clip_len=CLIP_SECONDS_DEFAULT,
            relevant_clip_ids=labeled,
            saliency_scores=[[4] * _ANNOTATORS if j in salient else [2] * _ANNOTATORS
                             for j in labeled],
        ).validate())
        items.append(ManifestItem(qid=qid, vid=vid, num_clips=k,
                                  query_item=query_item, frame_items=frame_items))

    manifest = DatasetManifest(
        model_dim=spec.model_dim,
        activation_files=["activations.hlca"],
        items=items,
        meta={
            "source": "synthetic",
            "joint_dim": spec.joint_dim,
            "tokens_per_item": spec.tokens_per_item,
            "seed": spec.seed,
            "planted_correlation": spec.planted_correlation,
        },
    )
    write_activation_file(out_dir / "activations.hlca", sequences)
    save_manifest(out_dir / "manifest.json", manifest)
    save_annotations(out_dir / "annotations.jsonl", records)
    return SyntheticResult(data_dir=out_dir, manifest=manifest, latents=latents)
