"""Accuracy, confusion matrices and cross-fold aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _pair(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.int64).ravel()
    y = np.asarray(labels, dtype=np.int64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"{len(p)} predictions vs {len(y)} labels")
    if p.size == 0:
        raise ValueError("accuracy of an empty evaluation is undefined")
    return p, y


def accuracy(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    return float(np.count_nonzero(p == y)) / p.size


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true label, columns = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def per_label_accuracy(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    def row_normalized(self) -> np.ndarray:
        """Percentages per true label (rows with no samples stay zero)."""
        rows = self.counts.sum(axis=1, keepdims=True)
        return 100.0 * self.counts / np.maximum(rows, 1)

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts)

    def to_text(self, names: list[str] | None = None) -> str:
        k = self.counts.shape[0]
        names = names or [str(i) for i in range(k)]
        width = max(6, max(len(n) for n in names))
        grid = self.row_normalized()
        lines = [" " * width + " " + " ".join(f"{n[:6]:>6}" for n in names)]
        for i in range(k):
            lines.append(f"{names[i]:>{width}} " + " ".join(f"{v:6.1f}" for v in grid[i]))
        return "\n".join(lines)

    def write_csv(self, path, names: list[str] | None = None) -> None:
        k = self.counts.shape[0]
        names = names or [str(i) for i in range(k)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + names)
            for i in range(k):
                w.writerow([names[i]] + [int(c) for c in self.counts[i]])

    def write_png(self, path, names: list[str] | None = None, title: str = "") -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        k = self.counts.shape[0]
        names = names or [str(i) for i in range(k)]
        grid = self.row_normalized()
        fig, ax = plt.subplots(figsize=(1.0 + 0.5 * k, 1.0 + 0.5 * k))
        ax.imshow(grid, cmap="Blues", vmin=0, vmax=100)
        ax.set_xticks(range(k), names, rotation=90, fontsize=7)
        ax.set_yticks(range(k), names, fontsize=7)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        for i in range(k):
            for j in range(k):
                if grid[i, j] >= 0.5:
                    ax.text(j, i, f"{grid[i, j]:.0f}", ha="center", va="center", fontsize=6,
                            color="white" if grid[i, j] > 50 else "black")
        if title:
            ax.set_title(title, fontsize=8)
        fig.tight_layout()
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)


def confusion_matrix(predictions, labels, k: int) -> ConfusionMatrix:
    p, y = _pair(predictions, labels)
    if p.min() < 0 or y.min() < 0 or p.max() >= k or y.max() >= k:
        raise ValueError(f"label or prediction index outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (y, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class FoldSummary:
    accuracies: list[float]
    mean: float
    std: float | None  # None when fewer than two folds

    def format(self, percent: bool = True) -> str:
        """``mm.mm ± s.ss``; fractions are shown as percentages by default."""
        scale = 100.0 if percent else 1.0
        if self.std is None:
            return f"{self.mean * scale:.2f} ± undefined"
        return f"{self.mean * scale:.2f} ± {self.std * scale:.2f}"


def aggregate_folds(per_fold_accuracies) -> FoldSummary:
    """Mean and sample (n - 1) standard deviation across folds."""
    values = [float(a) for a in per_fold_accuracies]
    if not values:
        raise ValueError("no fold accuracies to aggregate")
    mean = math.fsum(values) / len(values)
    if len(values) < 2:
        return FoldSummary(values, mean, None)
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return FoldSummary(values, mean, math.sqrt(var))


def write_results(path, rows: list[tuple[int, float, float]], summary: FoldSummary | None = None) -> None:
    """``fold,subset_fraction,accuracy`` rows, then a ``#``-prefixed summary block."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "subset_fraction", "accuracy"])
        for fold, frac, acc in rows:
            w.writerow([fold, repr(float(frac)), f"{acc:.6f}"])
        if summary is not None:
            fh.write(f"# folds: {len(summary.accuracies)}\n")
            fh.write(f"# mean_accuracy: {summary.mean:.6f}\n")
            fh.write(f"# std_accuracy: {'undefined' if summary.std is None else f'{summary.std:.6f}'}\n")
            fh.write(f"# summary: {summary.format()}\n")
