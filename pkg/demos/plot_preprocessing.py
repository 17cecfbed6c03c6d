"""
Padding and augmentation
========================

Estimate an image's background from its border, pad it to a square with
matching noise, then draw a few training augmentations and the single
deterministic evaluation view.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from planktomae.data import generate_synthetic_dataset
from planktomae.imaging import (compute_dataset_stats, estimate_background, eval_transform, pad_to_square,
                                train_augment)

out = Path("demo_output")
out.mkdir(exist_ok=True)

# a wide crop of a synthetic cell, the way an imager delivers elongated frames
image = generate_synthetic_dataset(3, 1, 48, seed=2).images[1][8:40, :]
background = estimate_background(image)
print("background:", background)

square = pad_to_square(image, background, np.random.default_rng(0))
print(image.shape, "->", square.shape)

stats = compute_dataset_stats([square], 36)
rng = np.random.default_rng(1)
views = [train_augment(square, 32, (0.4, 1.0), stats, rng, working_size=36)[0] for _ in range(4)]
views.append(eval_transform(square, 32, stats, working_size=36)[0])

fig, axes = plt.subplots(1, 7, figsize=(14, 2.4))
axes[0].imshow(image, cmap="gray", vmin=0, vmax=255)
axes[0].set_title("input")
axes[1].imshow(square, cmap="gray", vmin=0, vmax=255)
axes[1].set_title("padded")
for ax, v, name in zip(axes[2:], views, ["train"] * 4 + ["eval"]):
    ax.imshow(v, cmap="gray")
    ax.set_title(name)
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "preprocessing.png", dpi=100)
