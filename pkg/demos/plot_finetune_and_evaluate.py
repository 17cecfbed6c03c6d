"""
Few-label fine-tuning and evaluation
====================================

Pretrain the tiny MAE briefly, fine-tune it on 10% of one fold's labels next
to a scratch-initialized copy, and compare the two confusion matrices.
"""

from pathlib import Path

import numpy as np

from planktomae.config import RunConfig
from planktomae.data import generate_synthetic_dataset, stratified_kfold
from planktomae.evaluation import aggregate_folds
from planktomae.imaging import compute_dataset_stats
from planktomae.checkpoint import load_checkpoint
from planktomae.train import finetune_fold, pretrain

out = Path("demo_output") / "finetune"

unlabeled = list(generate_synthetic_dataset(6, 128, seed=10).images)
pre_cfg = RunConfig(epochs=60, batch_size=64, reference_lr=6e-3, checkpoint_every=100)
stats = compute_dataset_stats(unlabeled, pre_cfg.working_size)
result = pretrain(pre_cfg, unlabeled, stats, out / "pretrain")
checkpoint = load_checkpoint(result.checkpoint_path)

labeled = generate_synthetic_dataset(6, 100, seed=20)
split = stratified_kfold(labeled.labels, 5, seed=0)[0]
accuracies = {}
for scratch in (False, True):
    cfg = RunConfig(finetune_epochs=50, fraction=0.1, scratch=scratch)
    fold = finetune_fold(cfg, list(labeled.images), labeled.labels, split, stats, checkpoint, 6)
    name = "scratch" if scratch else "pretrained"
    accuracies[name] = fold.accuracy
    print(f"{name}: {fold.train_count} labeled images, test accuracy {fold.accuracy:.3f}")
    print(fold.confusion.to_text(labeled.label_names))
    fold.confusion.write_png(out / f"confusion_{name}.png", labeled.label_names, title=name)

print("mean over both runs:", aggregate_folds(list(accuracies.values())).format())
