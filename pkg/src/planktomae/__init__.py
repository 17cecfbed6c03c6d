"""Masked-autoencoder pretraining and few-label fine-tuning for plankton images, in numpy."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifier import FinetuneModel, build_finetune_model, label_smoothed_cross_entropy, predict
from .config import RunConfig
from .data import (LabelBudget, SampleManifest, generate_synthetic_dataset, load_manifest, sample_label_subset,
                   stratified_kfold)
from .evaluation import ConfusionMatrix, accuracy, aggregate_folds, confusion_matrix
from .imaging import DatasetStats, compute_dataset_stats, eval_transform, pad_to_square, preprocess, train_augment
from .mae import MaeModel, ModelConfig, masked_reconstruction_loss, sample_mask
from .optim import AdamW, Schedule, cosine_warmup_lr, llrd_multipliers, scaled_base_lr
from .tensor import Tensor, no_grad
from .train import finetune_fold, pretrain

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Checkpoint", "ConfusionMatrix", "DatasetStats", "FinetuneModel", "LabelBudget", "MaeModel",
    "ModelConfig", "RunConfig", "SampleManifest", "Schedule", "Tensor", "accuracy", "aggregate_folds",
    "build_finetune_model", "compute_dataset_stats", "confusion_matrix", "cosine_warmup_lr", "eval_transform",
    "finetune_fold", "generate_synthetic_dataset", "label_smoothed_cross_entropy", "llrd_multipliers",
    "load_checkpoint", "load_manifest", "masked_reconstruction_loss", "no_grad", "pad_to_square", "predict",
    "preprocess", "pretrain", "sample_label_subset", "sample_mask", "save_checkpoint", "scaled_base_lr",
    "stratified_kfold", "train_augment",
]
