"""Fine-tuning model: pretrained encoder + bottleneck head, label-smoothed cross-entropy."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .mae import Encoder, ModelConfig
from .nn import LayerNorm, Linear, Module, patchify
from .tensor import Tensor


class FinetuneModel(Module):
    """Encoder over the full patch sequence, cls feature -> LN -> hidden -> GELU -> logits."""

    def __init__(self, cfg: ModelConfig, num_labels: int, hidden: int, drop_path_rate: float,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.num_labels = num_labels
        self.encoder = Encoder(cfg.encoder_config(drop_path_rate), rng)
        self.head_norm = LayerNorm(cfg.encoder_dim)
        self.head_hidden = Linear(cfg.encoder_dim, hidden, rng)
        self.head = Linear(hidden, num_labels, rng)

    def forward(self, patches, rng: np.random.Generator | None = None) -> Tensor:
        tokens = self.encoder(patches, None, rng if self.training else None)
        feature = tokens[:, 0]
        hidden = T.gelu(self.head_hidden(self.head_norm(feature)))
        return self.head(hidden)


class ConfigMismatch(ValueError):
    def __init__(self, diff: list[tuple[str, object, object]]):
        self.diff = diff
        lines = ", ".join(f"{k}: checkpoint={a!r} requested={b!r}" for k, a, b in diff)
        super().__init__(f"encoder configuration mismatch ({lines})")


_ENCODER_KEYS = ("image_size", "patch_size", "channels", "encoder_depth", "encoder_dim",
                 "encoder_heads", "mlp_ratio")


def encoder_config_diff(a: ModelConfig, b: ModelConfig) -> list[tuple[str, object, object]]:
    return [(k, getattr(a, k), getattr(b, k)) for k in _ENCODER_KEYS if getattr(a, k) != getattr(b, k)]


def build_finetune_model(checkpoint, num_labels: int, hidden: int = 512, drop_path_rate: float = 0.2,
                         scratch: bool = False, seed: int = 0, config: ModelConfig | None = None) -> FinetuneModel:
    """Fresh head on top of the checkpoint's encoder; the decoder is dropped.

    ``checkpoint`` is a :class:`~planktomae.checkpoint.Checkpoint` (or ``None``
    with ``scratch=True`` and an explicit ``config``). In scratch mode the
    encoder keeps its random initialization.
    """
    from .data import seeded_rng

    ckpt_cfg = ModelConfig.from_dict(checkpoint.config["model"]) if checkpoint is not None else None
    cfg = config or ckpt_cfg
    if cfg is None:
        raise ValueError("need a checkpoint or an explicit model config")
    if ckpt_cfg is not None and config is not None:
        diff = encoder_config_diff(ckpt_cfg, config)
        if diff:
            raise ConfigMismatch(diff)
    model = FinetuneModel(cfg, num_labels, hidden, drop_path_rate, seeded_rng(seed, 5))
    if not scratch:
        if checkpoint is None:
            raise ValueError("pretrained mode needs a checkpoint")
        prefix = "encoder."
        state = {k[len(prefix):]: v for k, v in checkpoint.params.items() if k.startswith(prefix)}
        model.encoder.load_state_dict(state)
    return model


def encoder_state(model: Module) -> dict[str, np.ndarray]:
    return {f"encoder.{k}": v for k, v in model.encoder.state_dict().items()}


def classify_forward(model: FinetuneModel, image_batch: np.ndarray, train_mode: bool,
                     rng: np.random.Generator | None = None) -> Tensor:
    model.train(train_mode)
    patches = patchify(np.asarray(image_batch, dtype=np.float32), model.cfg.grid)
    return model(patches, rng)


def label_smoothed_cross_entropy(logits: Tensor, labels, epsilon: float = 0.1) -> Tensor:
    """Cross-entropy against (1 - eps) on the true label plus eps/K spread over all K labels."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {epsilon}")
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must be {b} indices in [0, {k})")
    target = np.full((b, k), epsilon / k, dtype=logits.dtype)
    target[np.arange(b), labels] += 1.0 - epsilon
    logp = T.log_softmax(logits, axis=-1)
    return -(logp * target).sum() * (1.0 / b)


def finetune_step(model: FinetuneModel, images: np.ndarray, labels, optimizer, lr: float,
                  rng: np.random.Generator, epsilon: float = 0.1) -> float:
    optimizer.zero_grad()
    logits = classify_forward(model, images, True, rng)
    loss = label_smoothed_cross_entropy(logits, labels, epsilon)
    loss.backward()
    optimizer.step(lr)
    return loss.item()


def predict(model: FinetuneModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits = classify_forward(model, images[i:i + batch_size], False)
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
