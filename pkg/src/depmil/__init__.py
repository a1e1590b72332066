"""Transformer-based multiple instance learning with instance pseudo-labels."""

from .autograd import Tensor, backward, no_grad
from .bagsynth import Bag, BagRecipe, PatternSpec, generate, kfold_split, read_manifest, write_manifest
from .checkpoint import load_checkpoint, save_checkpoint
from .heads import VARIANTS, MilHeadSpec, MilModel, ModelSpec, bag_predict, build_model
from .metrics import MetricsReport, accuracy, aggregate_folds, auc_macro_ovr, evaluate, qwk, reports_to_csv
from .nn import BackboneSpec
from .optim import Adam
from .pseudolabel import assign_bag, assign_pseudo_labels, combined_loss, ensemble_infer, pseudo_label_round
from .train import TrainConfig, ensemble_predict, fit, train

__all__ = [
    "Adam",
    "BackboneSpec",
    "Bag",
    "BagRecipe",
    "MetricsReport",
    "MilHeadSpec",
    "MilModel",
    "ModelSpec",
    "PatternSpec",
    "Tensor",
    "TrainConfig",
    "VARIANTS",
    "accuracy",
    "aggregate_folds",
    "assign_bag",
    "assign_pseudo_labels",
    "auc_macro_ovr",
    "backward",
    "bag_predict",
    "build_model",
    "combined_loss",
    "ensemble_infer",
    "ensemble_predict",
    "evaluate",
    "fit",
    "generate",
    "kfold_split",
    "load_checkpoint",
    "no_grad",
    "pseudo_label_round",
    "qwk",
    "read_manifest",
    "reports_to_csv",
    "save_checkpoint",
    "train",
    "write_manifest",
]
