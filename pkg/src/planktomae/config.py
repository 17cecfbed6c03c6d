"""Flat run configuration, loadable from JSON and overridable from the command line.

Defaults follow the published recipe wherever it states a value; model shape and
epoch counts default to the desk-scale ``tiny`` setting.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .mae import ModelConfig

MODES = ("pretrain", "finetune", "eval", "preprocess", "synth")

# named seed streams; every random draw is keyed by (seed, stream, ...)
SPLIT, SPLIT_VAL, SUBSET, SYNTH, INIT, SHUFFLE, AUGMENT, MASK, DROP_PATH, PAD = range(1, 11)


@dataclass
class RunConfig:
    mode: str = "pretrain"
    seed: int = 0
    out: str = "runs/default"
    manifest: str = ""
    stats: str = ""
    checkpoint: str = ""
    input_dir: str = ""
    resume: str = ""

    # model (see ModelConfig)
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

    # images
    working_size: int = 36
    crop_scale_min: float = 0.4
    crop_scale_max: float = 1.0
    pad_noise: bool = True

    # pretraining
    epochs: int = 100
    batch_size: int = 64
    accumulation_steps: int = 1
    reference_lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_fraction: float = 0.05
    checkpoint_every: int = 10
    dump_recon: bool = False

    # fine-tuning
    finetune_epochs: int = 50
    finetune_batch_size: int = 128
    finetune_lr: float = 2e-3
    finetune_weight_decay: float = 0.01
    finetune_beta2: float = 0.999
    finetune_warmup_epochs: float = 5.0
    label_smoothing: float = 0.1
    drop_path: float = 0.2
    llrd_decay: float = 0.75
    hidden: int = 512
    folds: str = "0,1,2,3,4"
    k_folds: int = 5
    val_fraction: float = 0.15
    fraction: float = 1.0
    budget_rounding: str = "half_up"
    scratch: bool = False

    # synthetic corpus
    num_labels: int = 6
    per_label: int = 150
    difficulty: float = 1.0

    def validate(self) -> RunConfig:
        if self.mode not in MODES:
            raise ValueError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.batch_size % self.accumulation_steps:
            raise ValueError("batch_size: must be divisible by accumulation_steps")
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise ValueError("crop_scale_min: need 0 < crop_scale_min <= crop_scale_max <= 1")
        if self.fraction not in (0.01, 0.05, 0.1, 1.0) and not 0 < self.fraction <= 1:
            raise ValueError("fraction: must lie in (0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing: must lie in [0, 1)")
        if not 0.0 <= self.drop_path <= 1.0:
            raise ValueError("drop_path: must lie in [0, 1]")
        if not 0.0 <= self.finetune_warmup_epochs < self.finetune_epochs:
            raise ValueError("finetune_warmup_epochs: must lie in [0, finetune_epochs)")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction: must lie in [0, 1)")
        if self.working_size < self.image_size:
            raise ValueError("working_size: must be at least image_size")
        self.fold_list()
        self.model_config()
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(asdict(self))

    def fold_list(self) -> list[int]:
        folds = [int(f) for f in str(self.folds).split(",") if f.strip() != ""]
        bad = [f for f in folds if not 0 <= f < self.k_folds]
        if bad or not folds:
            raise ValueError(f"folds: indices must lie in [0, {self.k_folds}), got {self.folds!r}")
        return folds

    def snapshot(self) -> dict:
        """Hyperparameters without filesystem paths, for checkpoint headers."""
        d = asdict(self)
        for key in ("mode", "out", "manifest", "stats", "checkpoint", "input_dir", "resume"):
            d.pop(key)
        return {"model": self.model_config().to_dict(), "run": d}

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"{unknown[0]}: unknown config field")
        cfg = cls()
        for key, value in d.items():
            setattr(cfg, key, _coerce(known[key], value))
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def merged(self, overrides: dict) -> RunConfig:
        d = asdict(self)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(d)


def _coerce(f, value):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    try:
        if kind == "bool":
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ValueError(f"{f.name}: cannot interpret {value!r} as {kind}") from None
