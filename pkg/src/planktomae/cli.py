"""Command-line entry point: ``planktomae {synth,preprocess,pretrain,finetune,eval}``.

Every command takes an optional JSON ``--config`` whose keys are the fields of
:class:`~planktomae.config.RunConfig`; flags override file values and the merged
configuration is written to ``<out>/config.json`` before any work starts.
Failures exit with status 2 and a single JSON error line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .classifier import ConfigMismatch, FinetuneModel, predict
from .config import PAD, MODES, RunConfig
from .data import (ManifestError, Record, SampleManifest, generate_synthetic_dataset, load_manifest,
                   seeded_rng, stratified_kfold, write_manifest, write_split_files)
from .evaluation import aggregate_folds, confusion_matrix, write_results
from .imaging import (ConfigurationError, DatasetStats, compute_dataset_stats, preprocess, read_image,
                      write_png)
from .mae import ModelConfig
from .train import eval_batch, finetune_fold, load_images, pretrain

log = logging.getLogger("planktomae")

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")


class CommandError(ValueError):
    """A user-facing failure naming the offending config field or file."""


# ---------------------------------------------------------------------------
# helpers


def _require(cfg: RunConfig, name: str) -> str:
    value = getattr(cfg, name)
    if not value:
        raise CommandError(f"{name}: required for mode {cfg.mode!r}")
    return value


def _load_manifest(cfg: RunConfig) -> SampleManifest:
    manifest = load_manifest(_require(cfg, "manifest"))
    for warning in manifest.warnings:
        log.warning("%s", warning)
    missing = [r.path for r in manifest.records if not manifest.resolve(r).exists()]
    if missing:
        raise ManifestError(f"{len(missing)} image files missing, first: {missing[0]}")
    return manifest


def _stats(cfg: RunConfig, images, checkpoint: Checkpoint | None = None) -> DatasetStats:
    """Stats from ``cfg.stats``, else the checkpoint header, else computed from ``images``."""
    if cfg.stats:
        return DatasetStats.from_json(Path(cfg.stats).read_text())
    if checkpoint is not None and "stats" in checkpoint.config:
        s = checkpoint.config["stats"]
        return DatasetStats(float(s["mean"]), float(s["std"]))
    return compute_dataset_stats(images, cfg.working_size)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    ds = generate_synthetic_dataset(cfg.num_labels, cfg.per_label, cfg.image_size, cfg.difficulty,
                                    cfg.seed, out_dir=out)
    return {"images": len(ds.images), "labels": len(ds.label_names), "manifest": str(out / "manifest.csv")}


def _scan_tree(root: Path) -> list[Record]:
    """Images under ``root``; the label is the name of the directory holding each file."""
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    return [Record(str(p.relative_to(root)), p.parent.name if p.parent != root else "unlabeled") for p in files]


def cmd_preprocess(cfg: RunConfig) -> dict:
    """Pad every image to a square and write the copies, a manifest and ``stats.json``."""
    out = Path(cfg.out)
    if cfg.manifest:
        source = load_manifest(cfg.manifest)
        root, records = source.root, source.records
    else:
        root = Path(_require(cfg, "input_dir"))
        if not root.is_dir():
            raise CommandError(f"input_dir: not a directory: {root}")
        records = _scan_tree(root)
    kept, padded, skipped = [], [], []
    for i, rec in enumerate(records):
        src = Path(rec.path) if Path(rec.path).is_absolute() else root / rec.path
        try:
            img = read_image(src)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s (%s)", src, exc)
            skipped.append(str(src))
            continue
        square = preprocess(img, seeded_rng(cfg.seed, PAD, i), cfg.pad_noise)
        rel = Path("images") / rec.label / (Path(rec.path).stem + ".png")
        write_png(out / rel, square)
        kept.append(Record(rel.as_posix(), rec.label, rec.source))
        padded.append(square)
    if not kept:
        raise CommandError("input_dir: no readable images found")
    write_manifest(out / "manifest.csv", kept)
    stats = compute_dataset_stats(padded, cfg.working_size)
    (out / "stats.json").write_text(stats.to_json() + "\n")
    return {"images": len(kept), "skipped": skipped, "stats": {"mean": stats.mean, "std": stats.std}}


def cmd_pretrain(cfg: RunConfig) -> dict:
    manifest = _load_manifest(cfg)
    images = load_images(manifest, cfg.seed, cfg.pad_noise)
    stats = _stats(cfg, images)
    out = Path(cfg.out)
    (out / "stats.json").write_text(stats.to_json() + "\n")
    resume = cfg.resume or None
    if resume is not None:
        load_checkpoint(resume, expect_config=cfg.snapshot(), keys=["model"])
    result = pretrain(cfg, images, stats, out, resume=resume)
    return {"epochs": cfg.epochs, "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
            "checkpoint": str(result.checkpoint_path)}


def finetune_checkpoint(cfg: RunConfig, model: FinetuneModel, stats: DatasetStats,
                        label_names: list[str]) -> Checkpoint:
    config = {**cfg.snapshot(), "stats": {"mean": stats.mean, "std": stats.std},
              "head": {"num_labels": len(label_names), "hidden": cfg.hidden, "label_names": label_names}}
    return Checkpoint(config=config, params=model.state_dict(), epoch=cfg.finetune_epochs,
                      rng_state={"seed": cfg.seed})


def cmd_finetune(cfg: RunConfig) -> dict:
    manifest = _load_manifest(cfg)
    checkpoint = None
    if not cfg.scratch:
        checkpoint = load_checkpoint(_require(cfg, "checkpoint"))
    images = load_images(manifest, cfg.seed, cfg.pad_noise)
    stats = _stats(cfg, images, checkpoint)
    out = Path(cfg.out)
    splits = stratified_kfold(manifest, cfg.k_folds, cfg.seed, cfg.val_fraction)
    write_split_files(manifest, splits, out / "splits")
    labels, names = manifest.labels, manifest.label_names
    rows, fold_accuracies = [], []
    for fold in cfg.fold_list():
        result = finetune_fold(cfg, images, labels, splits[fold], stats, checkpoint, len(names))
        fold_dir = out / f"fold{fold}"
        save_checkpoint(fold_dir / "model.bin", finetune_checkpoint(cfg, result.model, stats, names))
        result.confusion.write_csv(fold_dir / "confusion.csv", names)
        (fold_dir / "confusion.txt").write_text(result.confusion.to_text(names) + "\n")
        result.confusion.write_png(fold_dir / "confusion.png", names)
        with open(fold_dir / "history.csv", "w") as fh:
            fh.write("epoch,train_loss,val_accuracy\n")
            for e, loss in enumerate(result.loss_history):
                val = result.val_history[e] if e < len(result.val_history) else float("nan")
                fh.write(f"{e + 1},{loss:.8f},{val:.8f}\n")
        _write_json(fold_dir / "train_counts.json",
                    {names[k]: int(v) for k, v in sorted(result.per_label_train_counts.items())})
        rows.append((fold, cfg.fraction, result.accuracy))
        fold_accuracies.append(result.accuracy)
        log.info("fold %d fraction %g accuracy %.4f", fold, cfg.fraction, result.accuracy)
    summary = aggregate_folds(fold_accuracies)
    write_results(out / "results.csv", rows, summary)
    return {"folds": [r[0] for r in rows], "accuracies": fold_accuracies, "summary": summary.format()}


def load_finetuned(path) -> tuple[FinetuneModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    head = ckpt.config.get("head")
    if head is None:
        raise CommandError(f"checkpoint: {path} has no classification head (pretraining checkpoint?)")
    model = FinetuneModel(ModelConfig.from_dict(ckpt.config["model"]), head["num_labels"], head["hidden"], 0.0,
                          np.random.default_rng(0))
    model.load_state_dict(ckpt.params)
    return model.eval(), ckpt


def cmd_eval(cfg: RunConfig) -> dict:
    model, ckpt = load_finetuned(_require(cfg, "checkpoint"))
    manifest = _load_manifest(cfg)
    names = ckpt.config["head"]["label_names"]
    index = {n: i for i, n in enumerate(names)}
    unknown = sorted({r.label for r in manifest.records} - set(index))
    if unknown:
        raise CommandError(f"manifest: labels not known to the checkpoint: {unknown}")
    labels = np.array([index[r.label] for r in manifest.records])
    images = load_images(manifest, cfg.seed, cfg.pad_noise)
    stats = _stats(cfg, images, ckpt)
    run = ckpt.config["run"]
    eval_cfg = cfg.merged({"image_size": run["image_size"], "working_size": run["working_size"]})
    pred = predict(model, eval_batch(eval_cfg, images, range(len(images)), stats))
    cm = confusion_matrix(pred, labels, len(names))
    out = Path(cfg.out)
    cm.write_csv(out / "confusion.csv", names)
    (out / "confusion.txt").write_text(cm.to_text(names) + "\n")
    cm.write_png(out / "confusion.png", names)
    metrics = {"accuracy": cm.accuracy, "count": cm.total,
               "per_label_accuracy": {n: float(a) for n, a in zip(names, cm.per_label_accuracy())}}
    _write_json(out / "metrics.json", metrics)
    return metrics


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
}
assert tuple(sorted(COMMANDS)) == tuple(sorted(MODES))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planktomae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in COMMANDS:
        p = sub.add_parser(mode, help=COMMANDS[mode].__doc__ and COMMANDS[mode].__doc__.splitlines()[0])
        p.add_argument("--config", help="JSON file of RunConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--manifest")
        p.add_argument("--checkpoint")
        p.add_argument("--stats")
        p.add_argument("--input-dir", dest="input_dir")
        p.add_argument("--fraction", type=float, choices=(0.01, 0.05, 0.1, 1.0))
        p.add_argument("--folds", help="comma-separated fold indices, e.g. 0,2,4")
        p.add_argument("--scratch", action="store_true", default=None)
        p.add_argument("--resume", help="checkpoint to continue pretraining from")
        p.add_argument("--dump-recon", dest="dump_recon", action="store_true", default=None)
        p.add_argument("--epochs", type=int)
        p.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                       help="override any config field (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in
                 ("seed", "out", "manifest", "checkpoint", "stats", "input_dir", "fraction", "folds",
                  "scratch", "resume", "dump_recon", "epochs")}
    for item in args.set:
        if "=" not in item:
            raise CommandError(f"--set: expected FIELD=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    overrides["mode"] = args.mode
    return base.merged(overrides).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.write(Path(cfg.out) / "config.json")
        summary = COMMANDS[cfg.mode](cfg)
    except (CommandError, ConfigurationError, ManifestError, CheckpointError, ConfigMismatch,
            ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 2
    print(json.dumps({"mode": cfg.mode, **summary}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
