"""Masked autoencoder: random patch masking, visible-only encoding, mask-token decoding.

The reconstruction loss averages squared error over the pixels of masked
patches only, optionally against per-patch standardized targets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import (
    Block,
    BlockConfig,
    EncoderConfig,
    LayerNorm,
    Linear,
    Module,
    PatchGrid,
    patchify,
    sincos_positional_table,
    trunc_normal,
)
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    encoder_depth: int = 4
    encoder_dim: int = 64
    encoder_heads: int = 4
    decoder_depth: int = 2
    decoder_dim: int = 32
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    normalize_targets: bool = True
    target_eps: float = 1e-6

    def __post_init__(self):
        if self.decoder_dim > self.encoder_dim:
            raise ValueError("decoder_dim must not exceed encoder_dim")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        self.grid  # validates divisibility

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.patch_size, self.channels)

    def encoder_config(self, drop_path_rate: float = 0.0) -> EncoderConfig:
        block = BlockConfig(self.encoder_dim, self.encoder_heads, self.mlp_ratio, drop_path_rate)
        return EncoderConfig(self.grid, self.encoder_depth, block, True)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


PRESETS = {
    "tiny": ModelConfig(),
    # the published encoder/decoder shapes, for reference; far beyond desk scale
    "vit_large": ModelConfig(image_size=224, patch_size=16, channels=1, encoder_depth=24,
                             encoder_dim=1024, encoder_heads=16, decoder_depth=8,
                             decoder_dim=512, decoder_heads=16),
}


# ---------------------------------------------------------------------------
# masking


@dataclass
class MaskSet:
    """Partition of one image's patch indices into masked and visible sets."""

    num_patches: int
    masked_indices: np.ndarray
    visible_indices: np.ndarray
    mask_ratio: float

    @property
    def num_masked(self) -> int:
        return len(self.masked_indices)


def sample_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> MaskSet:
    """Mask ``floor(ratio * N)`` patches chosen uniformly without replacement."""
    if num_patches < 1:
        raise ValueError("need at least one patch")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_masked = int(np.floor(ratio * num_patches + 1e-9))
    order = rng.permutation(num_patches)
    return MaskSet(
        num_patches,
        masked_indices=np.sort(order[:n_masked]),
        visible_indices=np.sort(order[n_masked:]),
        mask_ratio=ratio,
    )


@dataclass
class BatchMask:
    """Per-image masks stacked into (B, V) visible and (B, M) masked index arrays."""

    visible: np.ndarray
    masked: np.ndarray

    @property
    def num_patches(self) -> int:
        return self.visible.shape[1] + self.masked.shape[1]

    @classmethod
    def stack(cls, masks: list[MaskSet]) -> BatchMask:
        return cls(np.stack([m.visible_indices for m in masks]), np.stack([m.masked_indices for m in masks]))

    @classmethod
    def sample(cls, batch: int, num_patches: int, ratio: float, rng: np.random.Generator) -> BatchMask:
        return cls.stack([sample_mask(num_patches, ratio, rng) for _ in range(batch)])

    @classmethod
    def full(cls, batch: int, num_patches: int) -> BatchMask:
        return cls(np.tile(np.arange(num_patches), (batch, 1)), np.zeros((batch, 0), dtype=np.intp))

    def boolean(self) -> np.ndarray:
        """(B, N) array, True where masked."""
        out = np.zeros((self.visible.shape[0], self.num_patches), dtype=bool)
        np.put_along_axis(out, self.masked, True, axis=1)
        return out


def _as_batch_mask(mask, batch: int) -> BatchMask:
    if isinstance(mask, BatchMask):
        return mask
    if isinstance(mask, MaskSet):
        return BatchMask.stack([mask] * batch)
    return BatchMask.stack(list(mask))


# ---------------------------------------------------------------------------
# model


class Encoder(Module):
    """ViT encoder over a subset of patch tokens plus a learnable classification token."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.block.embed_dim
        self.patch_embed = Linear(cfg.grid.patch_dim, d, rng)
        self.cls_token = Tensor(trunc_normal(rng, (d,)), requires_grad=True)
        self.pos_table = sincos_positional_table(cfg.grid, d, cls_token=True)
        self.blocks = [Block(cfg.block, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)

    def set_drop_path(self, rate: float) -> None:
        for blk in self.blocks:
            blk.drop_path_rate = rate

    def forward(self, patches, visible: np.ndarray | None = None,
                rng: np.random.Generator | None = None) -> Tensor:
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        b, n, _ = patches.shape
        if n != self.cfg.grid.num_patches:
            raise ValueError(f"got {n} patches, encoder grid has {self.cfg.grid.num_patches}")
        if visible is None:
            visible = np.tile(np.arange(n), (b, 1))
        visible = np.asarray(visible)
        if visible.shape[0] != b or (visible.size and visible.max() >= n):
            raise ValueError(f"visible index array {visible.shape} does not fit {n} patches")
        x = self.patch_embed(T.gather_rows(patches, visible))
        x = x + self.pos_table[1:][visible].astype(x.dtype)
        d = x.shape[-1]
        cls = T.broadcast_to((self.cls_token + self.pos_table[0].astype(x.dtype)).reshape(1, 1, d), (b, 1, d))
        x = T.concat([cls, x], axis=1)
        for blk in self.blocks:
            x = blk(x, rng)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dd = cfg.decoder_dim
        block = BlockConfig(dd, cfg.decoder_heads, cfg.mlp_ratio, 0.0)
        self.embed = Linear(cfg.encoder_dim, dd, rng)
        self.mask_token = Tensor(trunc_normal(rng, (dd,)), requires_grad=True)
        self.pos_table = sincos_positional_table(cfg.grid, dd, cls_token=True)
        self.blocks = [Block(block, rng) for _ in range(cfg.decoder_depth)]
        self.norm = LayerNorm(dd)
        self.pred = Linear(dd, cfg.grid.patch_dim, rng)

    def forward(self, latent: Tensor, mask: BatchMask) -> Tensor:
        b = latent.shape[0]
        n = mask.num_patches
        if n != self.cfg.grid.num_patches or latent.shape[1] != mask.visible.shape[1] + 1:
            raise ValueError(
                f"latent of {latent.shape[1]} tokens does not match mask with "
                f"{mask.visible.shape[1]} visible of {n} patches"
            )
        y = self.embed(latent)
        dd = y.shape[-1]
        m = mask.masked.shape[1]
        seq = y[:, 1:]
        if m:
            tokens = T.broadcast_to(self.mask_token.reshape(1, 1, dd), (b, m, dd))
            seq = T.concat([seq, tokens], axis=1)
        restore = np.argsort(np.concatenate([mask.visible, mask.masked], axis=1), axis=1, kind="stable")
        seq = T.gather_rows(seq, restore) + self.pos_table[1:].astype(y.dtype)
        cls = y[:, :1] + self.pos_table[:1].astype(y.dtype)
        x = T.concat([cls, seq], axis=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.pred(self.norm(x))
        return x[:, 1:]


class MaeModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_config(), rng)
        self.decoder = Decoder(cfg, rng)

    def forward(self, patches, mask: BatchMask) -> Tensor:
        latent = encode_visible(patches, mask, self.encoder)
        return decode_with_mask_tokens(latent, mask, self.decoder)


def encode_visible(image_patches, mask, encoder: Encoder) -> Tensor:
    """Encode only the visible patches; returns (B, |V| + 1, D) with the cls token first."""
    patches = image_patches if isinstance(image_patches, Tensor) else Tensor(image_patches)
    if patches.ndim == 2:
        patches = patches.reshape(1, *patches.shape)
    mask = _as_batch_mask(mask, patches.shape[0])
    if mask.num_patches != patches.shape[1]:
        raise ValueError(f"mask covers {mask.num_patches} patches, image has {patches.shape[1]}")
    return encoder(patches, mask.visible)


def decode_with_mask_tokens(latent: Tensor, mask, decoder: Decoder) -> Tensor:
    """Predict pixel vectors for all N patches from the encoded visible tokens."""
    return decoder(latent, _as_batch_mask(mask, latent.shape[0]))


# ---------------------------------------------------------------------------
# loss


def patch_target_normalize(patch_pixels, eps: float = 1e-6) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(patch_pixels)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@dataclass
class ReconstructionBatch:
    target_patches: np.ndarray
    predicted_patches: Tensor
    mask: BatchMask | MaskSet
    normalize_targets: bool = True
    eps: float = 1e-6


def masked_reconstruction_loss(batch: ReconstructionBatch) -> Tensor:
    """Mean squared error over the pixels of masked patches.

    Per patch the squared error is averaged over pixels, then averaged over the
    masked set and the batch.
    """
    pred = batch.predicted_patches
    target = np.asarray(batch.target_patches)
    if target.ndim == 2:
        target = target[None]
        pred = pred.reshape(1, *pred.shape)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    mask = _as_batch_mask(batch.mask, target.shape[0])
    if mask.masked.shape[1] == 0:
        raise ValueError("no masked patches: reconstruction loss is undefined")
    if mask.num_patches != target.shape[1]:
        raise ValueError("mask does not match patch count")
    if batch.normalize_targets:
        target = patch_target_normalize(target, batch.eps)
    rows = np.arange(target.shape[0])[:, None]
    tgt = target[rows, mask.masked].astype(pred.dtype)
    diff = T.gather_rows(pred, mask.masked) - tgt
    return (diff * diff).mean()


def reconstruction_loss(model: MaeModel, images: np.ndarray, mask: BatchMask) -> Tensor:
    patches = patchify(np.asarray(images, dtype=np.float32), model.cfg.grid)
    pred = model(patches, mask)
    return masked_reconstruction_loss(
        ReconstructionBatch(patches, pred, mask, model.cfg.normalize_targets, model.cfg.target_eps)
    )


def pretrain_step(model: MaeModel, image_batch: np.ndarray, optimizer, lr: float,
                  rng: np.random.Generator, accumulation_steps: int = 1) -> float:
    """One optimizer update over ``image_batch`` (B, C, H, W), masks drawn per image.

    With ``accumulation_steps > 1`` the batch is cut into equal micro-batches whose
    gradients are averaged before the single update.
    """
    from .optim import accumulate_gradients

    images = np.asarray(image_batch, dtype=np.float32)
    masks = BatchMask.sample(images.shape[0], model.cfg.grid.num_patches, model.cfg.mask_ratio, rng)
    micro = np.array_split(np.arange(images.shape[0]), accumulation_steps)

    def loss_fn(idx):
        sub = BatchMask(masks.visible[idx], masks.masked[idx])
        return reconstruction_loss(model, images[idx], sub)

    return accumulate_gradients(micro, loss_fn, optimizer, lr)
