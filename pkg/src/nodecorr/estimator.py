"""scikit-learn compatible wrapper around the segmentation pipeline.

Samples are whole point clouds rather than rows: ``X`` is a sequence of clouds,
each either a :class:`~nodecorr.graph.PointCloud` or an ``(N, 3 + d)`` array
(xyz first, then extra features), and ``y`` is a matching sequence of per-point
label arrays.
"""
from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .graph import PointCloud
from .pipeline import BlockConfig, SegmentationModel, fit, segmentation_scores
from .pipeline.train import softmax_probs


def check_clouds(X, y=None, n_features: Optional[int] = None) -> List[PointCloud]:
    """Validate a sequence of clouds (and labels) and return ``PointCloud`` objects."""
    if isinstance(X, (PointCloud, np.ndarray)):
        raise TypeError("X must be a sequence of clouds, not a single cloud")
    X = list(X)
    if not X:
        raise ValueError("X contains no clouds")
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} clouds but y has {len(y)} label arrays")
    clouds = []
    for j, item in enumerate(X):
        if isinstance(item, PointCloud):
            feats = item.features()
            labels = item.labels
        else:
            feats = check_array(item, dtype=np.float64)
            labels = None
        if feats.shape[1] < 3:
            raise ValueError(f"cloud {j} has {feats.shape[1]} columns; need xyz first")
        if n_features is not None and feats.shape[1] != n_features:
            raise ValueError(f"cloud {j} has {feats.shape[1]} features, expected {n_features}")
        if y is not None:
            labels = column_or_1d(y[j])
            if labels.shape[0] != feats.shape[0]:
                raise ValueError(f"cloud {j}: {feats.shape[0]} points but {labels.shape[0]} labels")
        extras = feats[:, 3:] if feats.shape[1] > 3 else None
        clouds.append(PointCloud(feats[:, :3], extras, labels))
    return clouds


class NodeCorrelationSegmenter(ClassifierMixin, BaseEstimator):
    """Per-point classifier with self, local and non-local correlation blocks.

    Parameters mirror :class:`~nodecorr.pipeline.BlockConfig` plus the training
    settings; ``variant`` selects the block layout (``"baseline"`` disables all
    correlation).
    """

    def __init__(self, channels=32, k=8, dilation=2, reduction=8, variant="full",
                 n_steps=2000, learning_rate=1e-3, jitter=0.0, nonlocal_cap=8192,
                 dtype="float64", random_state=0):
        self.channels = channels
        self.k = k
        self.dilation = dilation
        self.reduction = reduction
        self.variant = variant
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.jitter = jitter
        self.nonlocal_cap = nonlocal_cap
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y=None):
        clouds = check_clouds(X, y)
        if any(c.labels is None for c in clouds):
            raise ValueError("every training cloud needs labels")
        self.classes_ = np.unique(np.concatenate([c.labels for c in clouds]))
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        encoded = [PointCloud(c.positions, c.extras, np.searchsorted(self.classes_, c.labels))
                   for c in clouds]
        self.n_features_in_ = 3 + clouds[0].n_extras
        config = BlockConfig(self.channels, self.k, self.dilation, self.reduction, self.variant,
                             self.nonlocal_cap)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.model_ = SegmentationModel(config, self.n_features_in_, self.classes_.size,
                                        seed=seed, dtype=np.dtype(self.dtype))
        log = fit(self.model_, encoded, int(self.n_steps), float(self.learning_rate), seed,
                  jitter=float(self.jitter))
        self.loss_curve_ = log.losses
        return self

    def decision_function(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "model_")
        return [self.model_.logits(c) for c in check_clouds(X, n_features=self.n_features_in_)]

    def predict_proba(self, X) -> List[np.ndarray]:
        return [softmax_probs(z) for z in self.decision_function(X)]

    def predict(self, X) -> List[np.ndarray]:
        return [self.classes_[z.argmax(axis=1)] for z in self.decision_function(X)]

    def score(self, X, y=None, sample_weight=None) -> float:
        """Mean IoU over all points of all clouds."""
        clouds = check_clouds(X, y, n_features=self.n_features_in_)
        preds = self.predict(clouds)
        truths = [np.searchsorted(self.classes_, c.labels) for c in clouds]
        pred_idx = [np.searchsorted(self.classes_, p) for p in preds]
        return segmentation_scores(truths, pred_idx, self.classes_.size)["mIoU"]
