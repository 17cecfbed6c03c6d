"""
Patches, positions and self-attention
=====================================

Cut an image into the patch sequence a ViT encoder sees, look at the fixed
sin-cos position table, and run one attention layer over the tokens.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from planktomae.data import generate_synthetic_dataset
from planktomae.nn import Attention, BlockConfig, PatchGrid, patchify, sincos_positional_table, unpatchify
from planktomae.tensor import Tensor, no_grad

out = Path("demo_output")
out.mkdir(exist_ok=True)

image = generate_synthetic_dataset(3, 1, 32, seed=0).images[0].astype(np.float32) / 255
grid = PatchGrid(32, 8, 1)
patches = patchify(image[None], grid)  # (16 patches, 64 pixels), row-major
print("grid:", grid.side, "x", grid.side, "->", patches.shape)
assert np.array_equal(unpatchify(patches, grid)[0], image)

# positions are fixed, not learned; nearby patches get similar codes
table = sincos_positional_table(grid, 64)
similarity = table @ table.T
print("patch 5 vs itself, a neighbour, the far corner:", np.round(similarity[5, [5, 6, 15]], 2))

fig, axes = plt.subplots(1, 3, figsize=(9, 3))
axes[0].imshow(image, cmap="gray")
axes[0].set_title("image")
axes[1].imshow(table, aspect="auto", cmap="RdBu")
axes[1].set_title("position table")
axes[2].imshow(similarity, cmap="viridis")
axes[2].set_title("position similarity")

# one attention layer over the embedded tokens (a random projection stands in for patch embedding)
rng = np.random.default_rng(0)
tokens = patches @ rng.standard_normal((64, 64)).astype(np.float32) * 0.1 + table
attn = Attention(BlockConfig(64, 4), rng)
with no_grad():
    mixed = attn(Tensor(tokens[None])).data
print("attention output:", mixed.shape)
fig.tight_layout()
fig.savefig(out / "patches_and_positions.png", dpi=100)
