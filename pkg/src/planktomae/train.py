"""Training loops: MAE pretraining and per-fold fine-tuning with evaluation.

All randomness is keyed by (seed, stream, epoch, index), so an interrupted run
resumed from a checkpoint replays exactly the draws of an uninterrupted one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifier import build_finetune_model, finetune_step, predict
from .config import AUGMENT, DROP_PATH, INIT, MASK, PAD, SHUFFLE, RunConfig
from .data import FoldSplit, LabelBudget, SampleManifest, sample_label_subset, seeded_rng
from .evaluation import ConfusionMatrix, accuracy, confusion_matrix
from .imaging import DatasetStats, eval_transform, preprocess, read_image, train_augment, write_png
from .mae import BatchMask, MaeModel, pretrain_step
from .nn import patchify, unpatchify
from .optim import AdamW, Schedule, cosine_warmup_lr, llrd_multipliers, scaled_base_lr
from . import tensor as T

log = logging.getLogger(__name__)


def load_images(manifest: SampleManifest, seed: int, pad_noise: bool = True) -> list[np.ndarray]:
    """Read and pad every manifest image (padding noise seeded per image index)."""
    return [preprocess(read_image(manifest.resolve(rec)), seeded_rng(seed, PAD, i), pad_noise)
            for i, rec in enumerate(manifest.records)]


def _augment_batch(cfg: RunConfig, images, indices, stats: DatasetStats, epoch: int) -> np.ndarray:
    scale = (cfg.crop_scale_min, cfg.crop_scale_max)
    return np.stack([
        train_augment(images[i], cfg.image_size, scale, stats, seeded_rng(cfg.seed, AUGMENT, epoch, int(i)),
                      working_size=cfg.working_size)
        for i in indices
    ])


def eval_batch(cfg: RunConfig, images, indices, stats: DatasetStats) -> np.ndarray:
    return np.stack([eval_transform(images[i], cfg.image_size, stats, cfg.working_size) for i in indices])


# ---------------------------------------------------------------------------
# pretraining


def _append_csv(path: Path, header: str, line: str) -> None:
    new = not path.exists()
    with open(path, "a") as fh:
        if new:
            fh.write(header + "\n")
        fh.write(line + "\n")


def pretrain_checkpoint(cfg: RunConfig, model: MaeModel, opt: AdamW, epoch: int, stats: DatasetStats) -> Checkpoint:
    return Checkpoint(
        config={**cfg.snapshot(), "stats": {"mean": stats.mean, "std": stats.std}},
        params=model.state_dict(),
        epoch=epoch,
        rng_state={"seed": cfg.seed, "next_epoch": epoch},
        optimizer=opt.state_arrays(),
        optimizer_step=opt.state.t,
    )


@dataclass
class PretrainResult:
    model: MaeModel
    epoch_losses: list[float]
    checkpoint_path: Path


def pretrain(cfg: RunConfig, images, stats: DatasetStats, out_dir, resume=None,
             stop_after: int | None = None) -> PretrainResult:
    """MAE training over in-memory uint8 images; writes ``loss.csv`` and checkpoints to ``out_dir``.

    ``stop_after`` ends the run after that many total epochs (as an interruption would).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = MaeModel(cfg.model_config(), seeded_rng(cfg.seed, INIT))
    batch = cfg.batch_size
    steps_per_epoch = len(images) // batch
    if steps_per_epoch < 1:
        raise ValueError(f"batch_size: {batch} exceeds the {len(images)} available images")
    base_lr = scaled_base_lr(cfg.reference_lr, batch)
    schedule = Schedule(base_lr, cfg.warmup_fraction * cfg.epochs, cfg.epochs, steps_per_epoch)
    opt = AdamW(model.named_parameters(), lr=base_lr, weight_decay=cfg.weight_decay,
                betas=(cfg.beta1, cfg.beta2))
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.params)
        opt.load_state_arrays(ckpt.optimizer, ckpt.optimizer_step)
        start = ckpt.epoch
        log.info("resumed from %s at epoch %d", resume, start)

    log_path = out_dir / "loss.csv"
    losses = []
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    ckpt_path = out_dir / "checkpoint.bin"
    for epoch in range(start, end):
        model.train()
        order = seeded_rng(cfg.seed, SHUFFLE, epoch).permutation(len(images))
        total = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * batch:(step + 1) * batch]
            x = _augment_batch(cfg, images, idx, stats, epoch)
            lr = cosine_warmup_lr(schedule, epoch * steps_per_epoch + step)
            total += pretrain_step(model, x, opt, lr, seeded_rng(cfg.seed, MASK, epoch, step),
                                   cfg.accumulation_steps)
        mean_loss = total / steps_per_epoch
        losses.append(mean_loss)
        _append_csv(log_path, "epoch,loss,lr", f"{epoch + 1},{mean_loss:.8f},{lr:.8e}")
        log.info("pretrain epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, mean_loss)
        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == end:
            ckpt = pretrain_checkpoint(cfg, model, opt, done, stats)
            save_checkpoint(ckpt_path, ckpt)
            if done % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_epoch{done:04d}.bin", ckpt)
            if cfg.dump_recon:
                dump_reconstructions(model, eval_batch(cfg, images, range(min(8, len(images))), stats),
                                     out_dir / f"recon_epoch{done:04d}", seeded_rng(cfg.seed, MASK, 10**6, done))
    return PretrainResult(model, losses, ckpt_path)


def dump_reconstructions(model: MaeModel, images: np.ndarray, out_dir, rng: np.random.Generator) -> list[Path]:
    """Masked input | reconstruction | original triptychs as 8-bit grayscale PNGs."""
    out_dir = Path(out_dir)
    grid = model.cfg.grid
    mask = BatchMask.sample(len(images), grid.num_patches, model.cfg.mask_ratio, rng)
    patches = patchify(images.astype(np.float32), grid)
    with T.no_grad():
        pred = model.eval()(patches, mask).data
    model.train()
    if model.cfg.normalize_targets:
        # undo per-patch target normalization using the true patch statistics
        mu = patches.mean(axis=-1, keepdims=True)
        sd = np.sqrt(patches.var(axis=-1, keepdims=True) + model.cfg.target_eps)
        pred = pred * sd + mu
    is_masked = mask.boolean()[..., None]
    recon = np.where(is_masked, pred, patches)
    masked_in = np.where(is_masked, patches.min(), patches)
    paths = []
    for i in range(len(images)):
        panels = [unpatchify(a[i], grid)[0] for a in (masked_in, recon, patches)]
        strip = np.concatenate(panels, axis=1)
        lo, hi = patches[i].min(), patches[i].max()
        pix = np.clip((strip - lo) / max(hi - lo, 1e-6) * 255.0, 0, 255).round().astype(np.uint8)
        path = out_dir / f"recon_{i:03d}.png"
        write_png(path, pix)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FoldResult:
    fold: int
    fraction: float
    accuracy: float
    confusion: ConfusionMatrix
    train_count: int
    per_label_train_counts: dict
    val_history: list[float] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    model: object = None


def finetune_fold(cfg: RunConfig, images, labels: np.ndarray, split: FoldSplit, stats: DatasetStats,
                  checkpoint: Checkpoint | None, num_labels: int | None = None,
                  track_val: bool = True) -> FoldResult:
    """Train on the label-budgeted train part of ``split``; report test accuracy of the final model."""
    labels = np.asarray(labels)
    k = num_labels or int(labels.max()) + 1
    budget = LabelBudget(cfg.fraction, cfg.budget_rounding)
    train_idx = sample_label_subset(split.indices("train"), labels, budget, cfg.seed)
    val_idx, test_idx = split.indices("val"), split.indices("test")

    model = build_finetune_model(None if cfg.scratch else checkpoint, k, cfg.hidden, cfg.drop_path,
                                 scratch=cfg.scratch, seed=cfg.seed * 1000 + split.fold,
                                 config=cfg.model_config())
    plan = llrd_multipliers(cfg.encoder_depth, cfg.llrd_decay)
    opt = AdamW(model.named_parameters(), lr=cfg.finetune_lr, weight_decay=cfg.finetune_weight_decay,
                betas=(cfg.beta1, cfg.finetune_beta2), lr_scales=plan.scale_for)
    batch = cfg.finetune_batch_size
    steps_per_epoch = max(1, math.ceil(len(train_idx) / batch))
    schedule = Schedule(cfg.finetune_lr, cfg.finetune_warmup_epochs, cfg.finetune_epochs, steps_per_epoch)

    val_x = eval_batch(cfg, images, val_idx, stats) if track_val and len(val_idx) else None
    result = FoldResult(split.fold, cfg.fraction, 0.0, None, len(train_idx),
                        budget.per_label_counts(labels[split.indices("train")]))
    stream = 1000 + split.fold
    for epoch in range(cfg.finetune_epochs):
        order = train_idx[seeded_rng(cfg.seed, SHUFFLE, stream, epoch).permutation(len(train_idx))]
        total = 0.0
        for step in range(steps_per_epoch):
            idx = order[step * batch:(step + 1) * batch]
            x = _augment_batch(cfg, images, idx, stats, stream * 10**4 + epoch)
            lr = cosine_warmup_lr(schedule, epoch * steps_per_epoch + step)
            total += finetune_step(model, x, labels[idx], opt, lr,
                                   seeded_rng(cfg.seed, DROP_PATH, stream, epoch, step), cfg.label_smoothing)
        result.loss_history.append(total / steps_per_epoch)
        if val_x is not None:
            result.val_history.append(accuracy(predict(model, val_x), labels[val_idx]))

    test_pred = predict(model, eval_batch(cfg, images, test_idx, stats))
    result.accuracy = accuracy(test_pred, labels[test_idx])
    result.confusion = confusion_matrix(test_pred, labels[test_idx], k)
    result.model = model
    return result
