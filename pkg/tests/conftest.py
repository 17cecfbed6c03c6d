"""Shared fixtures: the desk-scale pretraining run and held-out fine-tuning corpus.

Both are session scoped because the pretraining run takes a few CPU minutes and
several acceptance checks reuse it. Acceptance outcomes are collected in
``ACCEPTANCE`` and printed as one line per criterion at the end of the session.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest

from planktomae.checkpoint import Checkpoint, load_checkpoint
from planktomae.config import RunConfig
from planktomae.data import generate_synthetic_dataset, stratified_kfold
from planktomae.imaging import DatasetStats, compute_dataset_stats
from planktomae.train import finetune_fold, pretrain

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
PRETRAIN_SEED = 100  # corpus seed for the 1,024 pretraining images
HELDOUT_SEED = 200  # a different seed, so no pretraining image reappears
HELDOUT_PER_LABEL = 200

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def desk_config(*names: str, **overrides) -> RunConfig:
    d = {}
    for name in names:
        d.update(json.loads((CONFIGS / f"{name}.json").read_text()))
    d.update(overrides)
    return RunConfig.from_dict(d)


@dataclass
class PretrainRun:
    checkpoint: Checkpoint
    losses: list
    seconds: float
    stats: DatasetStats


@pytest.fixture(scope="session")
def desk_pretrain(tmp_path_factory) -> PretrainRun:
    synth = desk_config("desk_synth")
    ds = generate_synthetic_dataset(synth.num_labels, synth.per_label, synth.image_size, synth.difficulty,
                                    seed=PRETRAIN_SEED)
    assert len(ds.images) == 1024
    cfg = desk_config("desk_pretrain")
    images = list(ds.images)
    start = time.perf_counter()
    stats = compute_dataset_stats(images, cfg.working_size)
    result = pretrain(cfg, images, stats, tmp_path_factory.mktemp("desk_pretrain"))
    seconds = time.perf_counter() - start
    return PretrainRun(load_checkpoint(result.checkpoint_path), result.epoch_losses, seconds, stats)


@dataclass
class Heldout:
    """Held-out labeled corpus; fine-tuning runs are cached so checks can share them."""

    images: list
    labels: np.ndarray
    num_labels: int
    runs: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def finetune(self, checkpoint: Checkpoint, seed: int, fraction: float, scratch: bool):
        key = (seed, fraction, scratch, None if scratch else id(checkpoint))
        if key not in self.runs:
            cfg = desk_config("desk_finetune", seed=seed, fraction=fraction, scratch=scratch)
            split = stratified_kfold(self.labels, cfg.k_folds, seed, cfg.val_fraction)[0]
            s = checkpoint.config["stats"]
            stats = DatasetStats(s["mean"], s["std"])
            start = time.perf_counter()
            self.runs[key] = finetune_fold(cfg, self.images, self.labels, split, stats, checkpoint,
                                           self.num_labels, track_val=True)
            self.seconds[key] = time.perf_counter() - start
        return self.runs[key]

    def run_seconds(self, checkpoint: Checkpoint, seed: int, fraction: float, scratch: bool) -> float:
        self.finetune(checkpoint, seed, fraction, scratch)
        return self.seconds[(seed, fraction, scratch, None if scratch else id(checkpoint))]


@pytest.fixture(scope="session")
def heldout() -> Heldout:
    synth = desk_config("desk_synth")
    ds = generate_synthetic_dataset(synth.num_labels, HELDOUT_PER_LABEL, synth.image_size, synth.difficulty,
                                    seed=HELDOUT_SEED)
    return Heldout(list(ds.images), ds.labels, len(ds.label_names))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
