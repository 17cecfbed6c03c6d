"""AdamW, cosine-with-warmup schedule, linear LR scaling, layer-wise LR decay, gradient accumulation."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamWState,
               lr_scales: Sequence[float] | None = None,
               decay_mask: Sequence[bool] | None = None) -> list[float]:
    """In-place bias-corrected Adam update with decoupled weight decay.

    Returns the learning rate actually applied to each parameter. Non-finite
    gradients raise ``FloatingPointError`` before anything is modified.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"grad {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}; step rejected")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr_scales = lr_scales or [1.0] * len(params)
    decay_mask = decay_mask or [True] * len(params)

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    applied = []
    for p, g, m, v, scale, decay in zip(params, grads, state.m, state.v, lr_scales, decay_mask):
        lr = state.lr * scale
        applied.append(lr)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if decay and state.weight_decay:
            p *= p.dtype.type(1.0 - lr * state.weight_decay)
        denom = np.sqrt(v / c2) + state.eps
        p -= (lr / c1) * m / denom
    return applied


class AdamW:
    """AdamW over a module's named parameters with per-parameter LR multipliers.

    Parameters with fewer than two dimensions (biases, norm gains, tokens) are
    excluded from weight decay.
    """

    def __init__(self, named_params, lr: float = 1e-3, weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
                 lr_scales: dict[str, float] | Callable[[str], float] | None = None):
        self.named = list(named_params)
        self.state = AdamWState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)
        if lr_scales is None:
            self.lr_scales = [1.0] * len(self.named)
        elif callable(lr_scales):
            self.lr_scales = [lr_scales(n) for n, _ in self.named]
        else:
            self.lr_scales = [lr_scales[n] for n, _ in self.named]
        self.decay_mask = [p.ndim >= 2 for _, p in self.named]
        self.last_lrs: dict[str, float] = {}

    @property
    def params(self) -> list[Tensor]:
        return [p for _, p in self.named]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.state.lr = lr
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        applied = adamw_step([p.data for p in self.params], grads, self.state, self.lr_scales, self.decay_mask)
        self.last_lrs = {name: a for (name, _), a in zip(self.named, applied)}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for (name, _), m, v in zip(self.named, self.state.m, self.state.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.state.m = [np.array(arrays[f"m.{n}"], dtype=p.dtype) for n, p in self.named]
        self.state.v = [np.array(arrays[f"v.{n}"], dtype=p.dtype) for n, p in self.named]
        self.state.t = t


# ---------------------------------------------------------------------------
# learning-rate rules


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    warmup_epochs: float
    total_epochs: float
    steps_per_epoch: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))

    @property
    def total_steps(self) -> int:
        return int(round(self.total_epochs * self.steps_per_epoch))


def cosine_warmup_lr(schedule: Schedule, step: float) -> float:
    """Linear ramp from 0 to ``base_lr`` over warmup, then half-cosine down to ``min_lr``."""
    total, warm = schedule.total_steps, schedule.warmup_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside schedule range [0, {total}]")
    if step < warm:
        return schedule.base_lr * step / warm
    progress = (step - warm) / (total - warm)
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * progress))


def scaled_base_lr(reference_lr: float, effective_batch: int) -> float:
    """Linear scaling rule: ``reference_lr * effective_batch / 256``."""
    if effective_batch < 1:
        raise ValueError("effective batch must be at least 1")
    return reference_lr * effective_batch / 256


@dataclass(frozen=True)
class LlrdPlan:
    decay: float
    depth: int
    groups: tuple[str, ...]
    multipliers: tuple[float, ...]

    def multiplier(self, group: str) -> float:
        return self.multipliers[self.groups.index(group)]

    def group_of(self, param_name: str) -> str:
        """Map a parameter name onto embed / block.i / head."""
        name = param_name.removeprefix("encoder.")
        if name.startswith(("patch_embed", "cls_token", "pos_")):
            return "embed"
        match = re.match(r"blocks\.(\d+)\.", name)
        if match and param_name.startswith("encoder."):
            return f"block.{int(match.group(1)) + 1}"
        return "head"

    def scale_for(self, param_name: str) -> float:
        return self.multiplier(self.group_of(param_name))


def llrd_multipliers(depth: int, decay: float) -> LlrdPlan:
    """Head x1, block i (1 = nearest the input) x decay**(L+1-i), patch embedding x decay**(L+1)."""
    if not 0.0 < decay <= 1.0:
        raise ValueError(f"decay must lie in (0, 1], got {decay}")
    groups = ["embed"] + [f"block.{i}" for i in range(1, depth + 1)] + ["head"]
    mults = [decay ** (depth + 1)] + [decay ** (depth + 1 - i) for i in range(1, depth + 1)] + [1.0]
    return LlrdPlan(decay, depth, tuple(groups), tuple(mults))


# ---------------------------------------------------------------------------
# gradient accumulation


def accumulate_gradients(micro_batches: Sequence, loss_fn: Callable, optimizer: AdamW,
                         lr: float | None = None) -> float:
    """Average gradients over equally sized micro-batches, then take one optimizer step.

    Returns the mean micro-batch loss.
    """
    if len(micro_batches) < 1:
        raise ValueError("accumulation_steps must be at least 1")
    sizes = {len(mb) for mb in micro_batches}
    if len(sizes) != 1:
        raise ValueError(f"micro-batches have inconsistent sizes {sorted(sizes)}")
    steps = len(micro_batches)
    optimizer.zero_grad()
    total = 0.0
    for mb in micro_batches:
        loss = loss_fn(mb)
        total += loss.item()
        (loss * (1.0 / steps)).backward()
    optimizer.step(lr)
    return total / steps
