"""Query-conditioned video highlight scoring.

Fine-tunes the trainable top of a frozen dual encoder over precomputed
activations, scores video clips against a text query by cosine similarity,
smooths scores by temporal pooling, and evaluates with ranking metrics
(highlight-detection mAP and HIT@1).
"""

from .data import (
    ActivationStore,
    AnnotationRecord,
    DatasetManifest,
    HighlightDataset,
    InMemoryStore,
    ManifestItem,
    SaliencyTargets,
    SyntheticSpec,
    build_targets,
    generate_synthetic,
    load_annotations,
    load_manifest,
    load_predictions,
    normalize_rating,
    save_annotations,
    save_manifest,
    validate_manifest,
    write_activation_file,
    write_predictions,
)
from .encoder import (
    ActivationSequence,
    CheckpointBundle,
    TransformerTopConfig,
    checkpoint_load,
    checkpoint_save,
    encode_top,
    encode_top_backward,
    init_params,
)
from .errors import HlkitError
from .estimator import HighlightRanker
from .evalhd import (
    EvalReport,
    QueryEval,
    average_precision,
    compare_pooling,
    compare_pooling_scores,
    evaluate,
    evaluate_scores,
    hd_map,
    hit_at_1,
    score_dataset,
    write_report,
)
from .saliency import (
    SaliencyPrediction,
    cosine_similarity,
    saliency_loss_and_grads,
    saliency_pool,
    score_video,
)
from .training import (
    GradCheckReport,
    TrainConfig,
    build_batch,
    grad_check,
    load_train_config,
    save_train_config,
    train,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationSequence",
    "ActivationStore",
    "AnnotationRecord",
    "CheckpointBundle",
    "DatasetManifest",
    "EvalReport",
    "GradCheckReport",
    "HighlightDataset",
    "HighlightRanker",
    "HlkitError",
    "InMemoryStore",
    "ManifestItem",
    "QueryEval",
    "SaliencyPrediction",
    "SaliencyTargets",
    "SyntheticSpec",
    "TrainConfig",
    "TransformerTopConfig",
    "average_precision",
    "build_batch",
    "build_targets",
    "checkpoint_load",
    "checkpoint_save",
    "compare_pooling",
    "compare_pooling_scores",
    "cosine_similarity",
    "encode_top",
    "encode_top_backward",
    "evaluate",
    "evaluate_scores",
    "generate_synthetic",
    "grad_check",
    "hd_map",
    "hit_at_1",
    "init_params",
    "load_annotations",
    "load_manifest",
    "load_predictions",
    "load_train_config",
    "normalize_rating",
    "saliency_loss_and_grads",
    "saliency_pool",
    "save_annotations",
    "save_manifest",
    "save_train_config",
    "score_dataset",
    "score_video",
    "train",
    "train_step",
    "validate_manifest",
    "write_activation_file",
    "write_predictions",
    "write_report",
]
