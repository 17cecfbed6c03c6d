"""Transformer building blocks shared by the MAE encoder/decoder and the classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class PatchGrid:
    image_size: int
    patch_size: int
    channels: int = 1

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} does not divide image size {self.image_size}"
            )

    @property
    def side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.side**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2


@dataclass(frozen=True)
class BlockConfig:
    embed_dim: int
    num_heads: int
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"{self.num_heads} heads do not divide embed_dim {self.embed_dim}")
        if not 0.0 <= self.drop_path_rate <= 1.0:
            raise ValueError(f"drop_path_rate must lie in [0, 1], got {self.drop_path_rate}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class EncoderConfig:
    grid: PatchGrid
    depth: int
    block: BlockConfig
    use_classification_token: bool = True


# ---------------------------------------------------------------------------
# patch layout


def patchify(images, grid: PatchGrid) -> np.ndarray:
    """(C, H, W) or (B, C, H, W) pixels -> (..., num_patches, C * p * p) in row-major patch order.

    Within a patch, values are ordered (row, col, channel).
    """
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    b, c, h, w = x.shape
    if h != grid.image_size or w != grid.image_size or c != grid.channels:
        raise ValueError(f"image shape {(c, h, w)} does not match grid {grid}")
    p, s = grid.patch_size, grid.side
    out = x.reshape(b, c, s, p, s, p).transpose(0, 2, 4, 3, 5, 1).reshape(b, s * s, p * p * c)
    return out[0] if single else out


def unpatchify(patches, grid: PatchGrid) -> np.ndarray:
    x = np.asarray(patches)
    single = x.ndim == 2
    if single:
        x = x[None]
    b = x.shape[0]
    p, s, c = grid.patch_size, grid.side, grid.channels
    if x.shape[1:] != (grid.num_patches, grid.patch_dim):
        raise ValueError(f"patch array shape {x.shape[1:]} does not match grid {grid}")
    out = x.reshape(b, s, s, p, p, c).transpose(0, 5, 1, 3, 2, 4).reshape(b, c, s * p, s * p)
    return out[0] if single else out


def sincos_positional_table(grid: PatchGrid, dim: int, cls_token: bool = False) -> np.ndarray:
    """Fixed 2-D sine-cosine table, one row per patch (a leading zero row for a cls token).

    Half of the channels encode the row coordinate, half the column coordinate.
    """
    if dim % 4:
        raise ValueError(f"positional embedding dim must be divisible by 4, got {dim}")
    side = grid.side
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4.0))
    rows, cols = np.meshgrid(np.arange(side, dtype=np.float64), np.arange(side, dtype=np.float64), indexing="ij")

    def encode(pos):
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([encode(cols), encode(rows)], axis=1)
    if cls_token:
        table = np.concatenate([np.zeros((1, dim)), table], axis=0)
    return table.astype(np.float32)


# ---------------------------------------------------------------------------
# module plumbing


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


class Module:
    """Attribute-walking parameter container."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Tensor(trunc_normal(rng, (in_dim, out_dim), std), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


def drop_path(branch: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth: zero the whole residual branch of each sample with probability ``rate``.

    Survivors are scaled by 1 / (1 - rate). The first axis indexes samples.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"drop path rate must lie in [0, 1], got {rate}")
    if not train_mode or rate == 0.0:
        return branch
    if rate == 1.0:
        return branch * 0.0
    if rng is None:
        raise ValueError("drop_path in train mode needs an rng")
    keep = 1.0 - rate
    shape = (branch.shape[0],) + (1,) * (branch.ndim - 1)
    mask = (rng.random(shape) < keep).astype(branch.dtype) / np.asarray(keep, branch.dtype)
    return branch * mask


class Attention(Module):
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.num_heads = cfg.num_heads
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return attention_forward(x, self)


def attention_forward(tokens: Tensor, attn: Attention) -> Tensor:
    """Multi-head scaled dot-product self-attention over (B, T, D) tokens (or (T, D))."""
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
    b, t, d = tokens.shape
    if attn.qkv.weight.shape[0] != d:
        raise ValueError(f"token width {d} does not match attention width {attn.qkv.weight.shape[0]}")
    h = attn.num_heads
    if d % h:
        raise ValueError(f"{h} heads do not divide width {d}")
    dh = d // h
    qkv = attn.qkv(tokens).reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = attn.proj(out)
    return out.reshape(t, d) if single else out


class Mlp(Module):
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.fc1 = Linear(cfg.embed_dim, cfg.hidden_dim, rng)
        self.fc2 = Linear(cfg.hidden_dim, cfg.embed_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm residual block: x + DropPath(Attn(LN(x))), then x + DropPath(MLP(LN(x)))."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.drop_path_rate = cfg.drop_path_rate
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.attn = Attention(cfg, rng)
        self.norm2 = LayerNorm(cfg.embed_dim)
        self.mlp = Mlp(cfg, rng)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return transformer_block_forward(x, self, self.training, rng)


def transformer_block_forward(tokens: Tensor, block: Block, train_mode: bool,
                              rng: np.random.Generator | None = None) -> Tensor:
    rate = block.drop_path_rate
    x = tokens
    x = x + drop_path(block.attn(block.norm1(x)), rate, train_mode, rng)
    x = x + drop_path(block.mlp(block.norm2(x)), rate, train_mode, rng)
    return x
