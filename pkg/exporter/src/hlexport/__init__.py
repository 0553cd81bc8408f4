"""Offline bridge from a pretrained dual encoder to the highlight-scoring
engine: trunk activations, manifest, annotation pass-through, and the
pretrained top weights, all in the engine's file formats."""

from .export import (
    ExportFailure,
    ExportResult,
    ExportSpec,
    check_export,
    export_activations,
    zero_shot_scores,
)
from .trunk import (
    DualEncoder,
    load_dual_encoder,
    reference_image_embeddings,
    reference_text_embedding,
    text_trunk_tokens,
    top_params,
    tower_configs,
    vision_trunk_tokens,
)
from .video import VideoDecodeError, probe_duration, sample_center_frames

__version__ = "0.1.0"

__all__ = [
    "DualEncoder",
    "ExportFailure",
    "ExportResult",
    "ExportSpec",
    "VideoDecodeError",
    "check_export",
    "export_activations",
    "load_dual_encoder",
    "probe_duration",
    "reference_image_embeddings",
    "reference_text_embedding",
    "sample_center_frames",
    "text_trunk_tokens",
    "top_params",
    "tower_configs",
    "vision_trunk_tokens",
    "zero_shot_scores",
]
