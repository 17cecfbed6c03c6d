"""Sample manifests, stratified K-fold splits, label-budget subsets and a synthetic corpus."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import SPLIT, SPLIT_VAL, SUBSET, SYNTH
from .imaging import write_png

PARTS = ("train", "val", "test")
BUDGET_FRACTIONS = (0.01, 0.05, 0.10, 1.0)


class ManifestError(ValueError):
    pass


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for a named stream, e.g. ``seeded_rng(seed, SPLIT, fold)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class Record:
    path: str
    label: str
    source: str = ""


@dataclass
class SampleManifest:
    records: list[Record]
    root: Path = Path(".")
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.records:
            raise ManifestError("manifest is empty")
        seen = set()
        for rec in self.records:
            if rec.path in seen:
                raise ManifestError(f"duplicate path: {rec.path}")
            if not rec.label:
                raise ManifestError(f"empty label for {rec.path}")
            seen.add(rec.path)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def label_names(self) -> list[str]:
        return sorted({r.label for r in self.records})

    @property
    def label_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.label_names)}

    @property
    def labels(self) -> np.ndarray:
        index = self.label_index
        return np.array([index[r.label] for r in self.records], dtype=np.int64)

    def resolve(self, rec: Record) -> Path:
        p = Path(rec.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, indices) -> SampleManifest:
        return SampleManifest([self.records[i] for i in indices], self.root)


def load_manifest(path) -> SampleManifest:
    """Read a ``path,label,source`` CSV; relative image paths resolve against its directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["path", "label"]:
        raise ManifestError(f"{path}:1: header must start with 'path,label', got {rows[0]}")
    records, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        values = dict(zip(header, (v.strip() for v in row)))
        if not values["path"] or not values["label"]:
            raise ManifestError(f"{path}:{lineno}: empty path or label")
        if values["path"] in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate path {values['path']}")
        seen.add(values["path"])
        records.append(Record(values["path"], values["label"], values.get("source", "")))
    if not records:
        raise ManifestError(f"{path}: no records")
    manifest = SampleManifest(records, path.parent)
    manifest.warnings = [f"missing image file: {r.path}" for r in records if not manifest.resolve(r).exists()]
    return manifest


def write_manifest(path, records: Sequence[Record], split: str | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "source"] + (["split"] if split else []))
        for r in records:
            writer.writerow([r.path, r.label, r.source] + ([split] if split else []))


# ---------------------------------------------------------------------------
# stratified folds


@dataclass
class FoldSplit:
    fold: int
    k: int
    seed: int
    assignment: np.ndarray  # one of PARTS per record

    def indices(self, part: str) -> np.ndarray:
        if part not in PARTS:
            raise ValueError(f"unknown split part {part!r}")
        return np.flatnonzero(self.assignment == part)


def _labels_of(manifest_or_labels) -> np.ndarray:
    if isinstance(manifest_or_labels, SampleManifest):
        return manifest_or_labels.labels
    return np.asarray(manifest_or_labels)


def stratified_kfold(manifest, k: int = 5, seed: int = 0, val_fraction: float = 0.15) -> list[FoldSplit]:
    """K stratified folds: test = one of K per-label slices, val = ``val_fraction`` of the rest.

    Each label's samples are shuffled once with a seeded generator and cut into
    K contiguous slices whose sizes differ by at most one.
    """
    labels = _labels_of(manifest)
    if k < 2:
        raise ValueError("need at least 2 folds")
    values, counts = np.unique(labels, return_counts=True)
    short = [str(v) for v, c in zip(values, counts) if c < k]
    if short:
        raise ValueError(f"labels with fewer than {k} samples: {', '.join(short)}")

    slices: dict = {}
    for li, value in enumerate(values):
        members = np.flatnonzero(labels == value)
        members = members[seeded_rng(seed, SPLIT, li).permutation(len(members))]
        slices[value] = np.array_split(members, k)

    splits = []
    for fold in range(k):
        assignment = np.full(len(labels), "train", dtype=object)
        for li, value in enumerate(values):
            assignment[slices[value][fold]] = "test"
            rest = np.concatenate([s for j, s in enumerate(slices[value]) if j != fold])
            n_val = round_half_up(val_fraction * len(rest))
            picked = seeded_rng(seed, SPLIT_VAL, fold, li).permutation(len(rest))[:n_val]
            assignment[rest[picked]] = "val"
        splits.append(FoldSplit(fold, k, seed, assignment.astype(str)))
    return splits


def write_split_files(manifest: SampleManifest, splits: Sequence[FoldSplit], out_dir) -> list[Path]:
    """Emit ``fold{k}_{train|val|test}.csv`` with the manifest schema plus a split column.

    Relative image paths are rewritten against ``out_dir`` so each split file loads as a manifest.
    """
    out_dir = Path(out_dir)
    records = [r if Path(r.path).is_absolute()
               else Record(Path(os.path.relpath(manifest.resolve(r), out_dir)).as_posix(), r.label, r.source)
               for r in manifest.records]
    written = []
    for split in splits:
        for part in PARTS:
            out = out_dir / f"fold{split.fold}_{part}.csv"
            write_manifest(out, [records[i] for i in split.indices(part)], split=part)
            written.append(out)
    return written


# ---------------------------------------------------------------------------
# limited-label subsets


@dataclass(frozen=True)
class LabelBudget:
    """Fraction of labeled training data kept per label, never fewer than one sample.

    ``rounding="half_up"`` rounds p*n half up; ``"floor"`` truncates (the
    reading that reproduces the published per-class ranges).
    """

    fraction: float
    rounding: str = "half_up"

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"budget fraction must lie in (0, 1], got {self.fraction}")
        if self.rounding not in ("half_up", "floor"):
            raise ValueError(f"unknown rounding {self.rounding!r}")

    def count(self, n: int) -> int:
        x = self.fraction * n
        k = round_half_up(x) if self.rounding == "half_up" else int(math.floor(x + 1e-9))
        return min(n, max(1, k))

    def per_label_counts(self, labels) -> dict:
        values, counts = np.unique(np.asarray(labels), return_counts=True)
        return {v.item(): self.count(int(c)) for v, c in zip(values, counts)}


def sample_label_subset(train_indices, labels, budget: LabelBudget | float, seed: int = 0) -> np.ndarray:
    """Per label, the first ``budget.count(n)`` of a seeded permutation of its training samples.

    The permutation depends only on (seed, label), so subsets for growing
    fractions are nested.
    """
    if not isinstance(budget, LabelBudget):
        budget = LabelBudget(float(budget))
    train_indices = np.asarray(train_indices)
    part_labels = np.asarray(labels)[train_indices]
    chosen = []
    for value in np.unique(part_labels):
        members = train_indices[part_labels == value]
        order = seeded_rng(seed, SUBSET, int(value)).permutation(len(members))
        chosen.append(members[order[: budget.count(len(members))]])
    return np.sort(np.concatenate(chosen)) if chosen else train_indices[:0]


# ---------------------------------------------------------------------------
# synthetic fine-grained corpus

FAMILIES = ("chain", "star", "rod")


@dataclass(frozen=True)
class LabelSpec:
    name: str
    family: str
    count: int
    aspect: float


def synthetic_label_specs(num_labels: int, difficulty: float = 1.0) -> list[LabelSpec]:
    """Labels cycle over shape families; within a family they differ by one in element count
    and by a small aspect offset (a tenth of the per-sample aspect jitter at difficulty 1)."""
    specs = []
    base = {"chain": 2, "star": 3, "rod": 2}
    aspect_gap = 0.1 * _ASPECT_JITTER / max(difficulty, 1e-6)
    for i in range(num_labels):
        family = FAMILIES[i % len(FAMILIES)]
        variant = i // len(FAMILIES)
        specs.append(LabelSpec(f"{family}{variant}", family, base[family] + variant, 0.6 + aspect_gap * variant))
    return specs


_ASPECT_JITTER = 0.2
_MAX_TILT = 0.3  # radians; cells in a flow cell line up with the stream
_BLUR = 1.5 / 32  # defocus sigma as a fraction of the image side
_SUPERSAMPLE = 4


def _shape_mask(spec: LabelSpec, rng: np.random.Generator, size: int, difficulty: float) -> np.ndarray:
    n = size * _SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    jitter = difficulty
    theta = rng.uniform(-_MAX_TILT, _MAX_TILT) * jitter
    cx, cy = rng.uniform(-0.08, 0.08, 2) * jitter
    scale = 0.8 * (1.0 + rng.uniform(-0.12, 0.12) * jitter)
    aspect = spec.aspect + rng.uniform(-_ASPECT_JITTER, _ASPECT_JITTER) / 2 * jitter
    u = (np.cos(theta) * (xx - cx) + np.sin(theta) * (yy - cy)) / scale
    w = (-np.sin(theta) * (xx - cx) + np.cos(theta) * (yy - cy)) / scale

    if spec.family == "chain":
        k = spec.count
        r = 0.95 / k
        centers = (np.arange(k) - (k - 1) / 2) * 2 * r * 0.9
        bend = rng.uniform(-0.25, 0.25) * jitter
        inside = np.zeros_like(u, dtype=bool)
        for cu in centers:
            cw = bend * (cu**2)
            inside |= ((u - cu) / r) ** 2 + ((w - cw) / (r * (0.5 + aspect))) ** 2 <= 1.0
        return inside
    if spec.family == "star":
        k = spec.count
        radius = np.hypot(u, w)
        angle = np.arctan2(w, u)
        core = 0.3 * (0.7 + 0.5 * aspect)
        inside = radius <= core
        length = 0.95
        for j in range(k):
            phi = 2 * np.pi * j / k
            along = radius * np.cos(angle - phi)
            across = np.abs(radius * np.sin(angle - phi))
            taper = 0.09 * (1.0 - np.clip(along / length, 0, 1))
            inside |= (along > 0) & (along < length) & (across < taper + 0.015)
        return inside
    # segmented rod: k cells separated by thin gaps
    k = spec.count
    half_len = 0.9
    half_wid = 0.18 + 0.25 * aspect
    inside = (np.abs(u) < half_len) & (np.abs(w) < half_wid)
    cell = 2 * half_len / k
    pos = (u + half_len) / cell
    gap = np.abs(pos - np.round(pos)) * cell < 0.045
    interior = (np.round(pos) > 0) & (np.round(pos) < k)
    return inside & ~(gap & interior)


def render_synthetic_image(spec: LabelSpec, rng: np.random.Generator, size: int = 32,
                           difficulty: float = 1.0) -> np.ndarray:
    """Dark organism on a flat bright field, antialiased and softened by a slight defocus blur."""
    mask = _shape_mask(spec, rng, size, difficulty)
    coverage = mask.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))
    coverage = gaussian_filter(coverage, _BLUR * size, mode="nearest")
    background = rng.uniform(190, 225)
    foreground = background - rng.uniform(90, 140)
    img = background + (foreground - background) * coverage
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class SyntheticDataset:
    images: np.ndarray  # (n, size, size) uint8
    labels: np.ndarray
    label_names: list[str]
    manifest: SampleManifest


def generate_synthetic_dataset(num_labels: int, per_label: int, image_size: int = 32,
                               difficulty: float = 1.0, seed: int = 0, out_dir=None,
                               source: str = "synthetic") -> SyntheticDataset:
    """Deterministic corpus of organism-like shapes; writes PNGs and ``manifest.csv`` when ``out_dir`` is given."""
    if num_labels < 2:
        raise ValueError("need at least two labels")
    specs = synthetic_label_specs(num_labels, difficulty)
    images, labels, records = [], [], []
    for li, spec in enumerate(specs):
        for j in range(per_label):
            rng = seeded_rng(seed, SYNTH, li, j)
            images.append(render_synthetic_image(spec, rng, image_size, difficulty))
            labels.append(li)
            records.append(Record(f"{spec.name}/{spec.name}_{j:05d}.png", spec.name, source))
    root = Path(out_dir) if out_dir is not None else Path(".")
    manifest = SampleManifest(records, root)
    names = [s.name for s in specs]
    # label indices follow sorted names, matching SampleManifest.label_index
    index = manifest.label_index
    label_arr = np.array([index[names[li]] for li in labels], dtype=np.int64)
    if out_dir is not None:
        for rec, img in zip(records, images):
            write_png(root / rec.path, img)
        write_manifest(root / "manifest.csv", records)
    return SyntheticDataset(np.stack(images), label_arr, manifest.label_names, manifest)
