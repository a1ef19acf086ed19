"""Segmentation metrics from a confusion matrix: OA, mAcc, mIoU."""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np


def confusion_matrix(truth, pred, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts points of true class ``t`` predicted as ``p``."""
    truth = np.asarray(truth, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction lengths differ")
    return np.bincount(truth * num_classes + pred, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def scores_from_confusion(cm: np.ndarray) -> Dict[str, float]:
    """OA, mAcc and mIoU.

    mIoU averages over classes present in the ground truth or the prediction;
    mAcc averages over classes present in the ground truth (accuracy is
    undefined for the others).
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("no labeled points to score")
    tp = np.diag(cm)
    gt = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    union = gt + predicted - tp
    seen = union > 0
    present = gt > 0
    return {
        "OA": float(tp.sum() / total),
        "mAcc": float(np.mean(tp[present] / gt[present])),
        "mIoU": float(np.mean(tp[seen] / union[seen])),
    }


def segmentation_scores(truths: Sequence, preds: Sequence, num_classes: int) -> Dict[str, float]:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(truths, preds):
        cm += confusion_matrix(t, p, num_classes)
    return scores_from_confusion(cm)
