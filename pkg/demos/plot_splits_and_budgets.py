"""
Stratified folds and label budgets
==================================

Generate the synthetic fine-grained corpus, split it into five stratified
folds, and draw nested 1% / 5% / 10% labeled subsets from one training part.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from planktomae.data import LabelBudget, generate_synthetic_dataset, sample_label_subset, stratified_kfold

out = Path("demo_output")
out.mkdir(exist_ok=True)

ds = generate_synthetic_dataset(num_labels=6, per_label=150, seed=0)
print("labels:", ds.label_names)

fig, axes = plt.subplots(len(ds.label_names), 6, figsize=(6, 6))
for row, label in enumerate(range(len(ds.label_names))):
    for col, idx in enumerate(np.flatnonzero(ds.labels == label)[:6]):
        axes[row, col].imshow(ds.images[idx], cmap="gray", vmin=0, vmax=255)
        axes[row, col].axis("off")
    axes[row, 0].set_title(ds.label_names[label], fontsize=7, loc="left")
fig.tight_layout()
fig.savefig(out / "synthetic_labels.png", dpi=100)

folds = stratified_kfold(ds.labels, k=5, seed=0)
for split in folds:
    sizes = {part: len(split.indices(part)) for part in ("train", "val", "test")}
    print(f"fold {split.fold}:", sizes)

train = folds[0].indices("train")
previous = set()
for p in (0.01, 0.05, 0.10):
    subset = sample_label_subset(train, ds.labels, p, seed=0)
    assert previous <= set(subset)  # nested for a fixed seed
    previous = set(subset)
    print(f"{p:>5.0%}: {np.bincount(ds.labels[subset]).tolist()} per label")

# the two rounding readings differ at the margins
for n in (50, 150, 685):
    print(n, "images:", LabelBudget(0.01).count(n), "(half up) vs", LabelBudget(0.01, "floor").count(n), "(floor)")
