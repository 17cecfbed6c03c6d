"""
Masked-autoencoder pretraining in miniature
===========================================

Mask 75% of the patches, train the tiny MAE for a few epochs on a small
synthetic corpus, and save masked-input / reconstruction / original panels.
"""

from pathlib import Path

import numpy as np

from planktomae.config import RunConfig
from planktomae.data import generate_synthetic_dataset
from planktomae.imaging import compute_dataset_stats
from planktomae.mae import sample_mask
from planktomae.train import dump_reconstructions, eval_batch, pretrain

out = Path("demo_output") / "pretrain"

# with 16 patches and ratio 0.75 the encoder sees exactly 4
mask = sample_mask(16, 0.75, np.random.default_rng(0))
print("visible patches:", mask.visible_indices, "masked:", len(mask.masked_indices))

images = list(generate_synthetic_dataset(4, 32, 32, seed=1).images)
cfg = RunConfig(epochs=15, batch_size=32, reference_lr=6e-3, checkpoint_every=100)
stats = compute_dataset_stats(images, cfg.working_size)
result = pretrain(cfg, images, stats, out)
print("loss per epoch:", np.round(result.epoch_losses, 3))

paths = dump_reconstructions(result.model, eval_batch(cfg, images, range(4), stats), out / "recon",
                             np.random.default_rng(0))
print("wrote", len(paths), "reconstruction panels to", out / "recon")
