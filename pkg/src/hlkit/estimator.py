"""Scikit-learn-style estimator over the fine-tuning pipeline.

``HighlightRanker`` is the package's high-level API: ``fit`` fine-tunes both
encoder tops on a dataset of cached activations and rated clips, ``predict``
returns per-clip saliency scores for every (video, query) pair, and ``score``
reports highlight-detection mAP. Hyperparameters follow the usual sklearn
conventions (declared in ``__init__``, discoverable through ``get_params``,
clonable), so the ranker drops into pipelines and parameter sweeps.
"""

import tempfile
from pathlib import Path

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import HighlightDataset, InMemoryStore
from .encoder import CheckpointBundle, TransformerTopConfig, checkpoint_save
from .errors import ConfigError
from .evalhd import evaluate_scores, predictions_to_map, score_dataset
from .training import TrainConfig, train


def _dataset(X) -> HighlightDataset:
    if isinstance(X, HighlightDataset):
        return X
    if isinstance(X, (str, Path)):
        return HighlightDataset.open(X)
    raise ConfigError(
        f"X must be a HighlightDataset or a data directory path, got {type(X).__name__}")


def pick_num_heads(model_dim: int) -> int:
    for heads in (8, 4, 2, 1):
        if model_dim % heads == 0:
            return heads
    return 1


class HighlightRanker(BaseEstimator):
    """Query-conditioned clip ranker backed by two trainable encoder tops.

    Parameters mirror the training configuration; dimensions left as ``None``
    are resolved from the dataset when ``fit`` runs.
    """

    def __init__(self, top_depth=1, steps=200, learning_rate=1e-4, batch_videos=4,
                 pool_radius=1, weight_decay=0.01, grad_clip_norm=1.0, beta1=0.9,
                 beta2=0.999, eps_opt=1e-8, num_heads=None, mlp_dim=None,
                 joint_dim=None, seed=0, workers=1):
        self.top_depth = top_depth
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_videos = batch_videos
        self.pool_radius = pool_radius
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_opt = eps_opt
        self.num_heads = num_heads
        self.mlp_dim = mlp_dim
        self.joint_dim = joint_dim
        self.seed = seed
        self.workers = workers

    def _resolve_config(self, dataset: HighlightDataset) -> TrainConfig:
        joint_dim = self.joint_dim if self.joint_dim else \
            int(dataset.manifest.meta.get("joint_dim",
                                          max(4, dataset.store.model_dim // 2)))

        def tower(store, causal):
            model_dim = store.model_dim
            return TransformerTopConfig(
                model_dim=model_dim,
                num_heads=self.num_heads if self.num_heads else pick_num_heads(model_dim),
                mlp_dim=self.mlp_dim if self.mlp_dim else 4 * model_dim,
                num_layers=self.top_depth, joint_dim=joint_dim,
                seq_len_max=store.max_num_tokens(), causal=causal)

        return TrainConfig(
            batch_videos=self.batch_videos, learning_rate=self.learning_rate,
            beta1=self.beta1, beta2=self.beta2, eps_opt=self.eps_opt,
            weight_decay=self.weight_decay, grad_clip_norm=self.grad_clip_norm,
            steps=self.steps, seed=self.seed, top_depth=self.top_depth,
            pool_radius=self.pool_radius,
            vision=tower(dataset.store, causal=False),
            text=tower(dataset.query_store, causal=True),
        )

    def fit(self, X, y=None):
        """Fine-tune both encoder tops on the dataset's rated clips.

        Targets come from the dataset's own annotations; ``y`` is accepted
        only for interface compatibility and must be None.
        """
        if y is not None:
            raise ConfigError("targets are derived from the dataset annotations; "
                              "pass y=None")
        dataset = _dataset(X)
        config = self._resolve_config(dataset)
        store = InMemoryStore.from_store(dataset.store)
        query_store = store if dataset.query_store is dataset.store else \
            InMemoryStore.from_store(dataset.query_store)
        with tempfile.TemporaryDirectory(prefix="hlkit-fit-") as tmp:
            result = train(dataset.manifest, store, dataset.targets_by_qid(),
                           config, tmp, workers=self.workers,
                           query_store=query_store)
        self.config_ = config
        self.params_vision_ = result.params_vision
        self.params_text_ = result.params_text
        self.train_reports_ = result.reports
        return self

    def _bundle(self) -> CheckpointBundle:
        check_is_fitted(self, "params_vision_")
        return CheckpointBundle(
            params_vision=self.params_vision_, params_text=self.params_text_,
            config_vision=self.config_.vision, config_text=self.config_.text,
            step=len(self.train_reports_))

    def predict(self, X) -> list:
        """Per-clip saliency predictions (pooled at ``pool_radius``) for every
        (video, query) pair in the dataset."""
        dataset = _dataset(X)
        return score_dataset(self._bundle(), dataset.manifest, dataset.store,
                             pool_radius=self.pool_radius, workers=self.workers,
                             query_store=dataset.query_store)

    def score(self, X, y=None) -> float:
        """Highlight-detection mAP of the pooled predictions on the dataset."""
        dataset = _dataset(X)
        predictions = self.predict(dataset)
        report = evaluate_scores(predictions_to_map(predictions, pooled=True),
                                 dataset.records, pool_radius=0)
        return report.map

    def save_checkpoint(self, path) -> None:
        bundle = self._bundle()
        checkpoint_save(path, bundle.params_vision, bundle.params_text,
                        bundle.config_vision, bundle.config_text, bundle.step)
