"""Prediction and scoring over collections of labeled clouds."""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from ..graph import PointCloud
from .metrics import confusion_matrix, scores_from_confusion
from .model import SegmentationModel


def predict_labels(model: SegmentationModel, cloud: PointCloud, graph=None) -> np.ndarray:
    return model.logits(cloud, graph).argmax(axis=1)


def evaluate(clouds: Sequence[PointCloud], model: SegmentationModel,
             per_cloud: bool = False) -> Dict:
    """OA / mAcc / mIoU pooled over every point of every cloud."""
    if not clouds:
        raise ValueError("evaluate needs at least one cloud")
    k = model.num_classes
    total = np.zeros((k, k), dtype=np.int64)
    breakdown: List[Dict[str, float]] = []
    for cloud in clouds:
        if cloud.labels is None:
            raise ValueError("evaluate needs labeled clouds")
        cm = confusion_matrix(cloud.labels, predict_labels(model, cloud), k)
        total += cm
        if per_cloud:
            breakdown.append(scores_from_confusion(cm))
    scores = scores_from_confusion(total)
    if per_cloud:
        scores["per_cloud"] = breakdown
    return scores
