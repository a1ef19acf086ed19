"""Model composition, training, evaluation, synthetic data and checkpoints."""
from .evaluate import evaluate, predict_labels
from .metrics import confusion_matrix, scores_from_confusion, segmentation_scores
from .model import VARIANTS, BlockConfig, SegmentationModel, parameter_count
from .synthetic import NUM_CLASSES, gen_dataset, gen_synthetic_scene, scene_layout
from .train import Adam, cross_entropy, fit, loss_and_grads, train_step

__all__ = [
    "VARIANTS",
    "BlockConfig",
    "SegmentationModel",
    "parameter_count",
    "Adam",
    "cross_entropy",
    "fit",
    "loss_and_grads",
    "train_step",
    "evaluate",
    "predict_labels",
    "confusion_matrix",
    "scores_from_confusion",
    "segmentation_scores",
    "NUM_CLASSES",
    "gen_dataset",
    "gen_synthetic_scene",
    "scene_layout",
]
