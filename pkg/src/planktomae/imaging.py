"""Preprocessing (background-matched square padding) and train/eval image transforms.

Raw images are uint8 numpy arrays, (H, W) for grayscale or (H, W, 3) for RGB.
Transforms emit float32 arrays shaped (1, out, out), standardized by the
dataset mean and std of pixel values scaled to [0, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

LUMA_WEIGHTS = (299, 587, 114)  # per mille
STD_FLOOR = 1e-6  # below this the dataset is treated as constant


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BackgroundModel:
    mode_color: tuple[int, ...]
    noise_std: tuple[float, ...]


@dataclass(frozen=True)
class DatasetStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ConfigurationError(f"dataset std must be positive, got {self.std}")

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean, "std": self.std}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> DatasetStats:
        d = json.loads(text)
        return cls(float(d["mean"]), float(d["std"]))


# ---------------------------------------------------------------------------
# file IO


def read_image(path) -> np.ndarray:
    """Load PNG / PGM / PPM as uint8, (H, W) or (H, W, 3)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path, pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise TypeError("write_png expects uint8 pixels")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def _check_raw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be nonempty")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    return img


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Integer luma conversion; a gray image (or RGB with equal channels) maps to itself."""
    img = _check_raw(img)
    if img.ndim == 2:
        return img
    rgb = img.astype(np.uint32)
    r, g, b = LUMA_WEIGHTS
    return ((r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2] + 500) // 1000).astype(np.uint8)


# ---------------------------------------------------------------------------
# background-matched padding


def border_pixels(img: np.ndarray) -> np.ndarray:
    """The union of the four 1-pixel borders, each pixel once, in row-major scan order."""
    img = _check_raw(img)
    h, w = img.shape[:2]
    on_border = np.zeros((h, w), dtype=bool)
    on_border[0, :] = on_border[-1, :] = True
    on_border[:, 0] = on_border[:, -1] = True
    return img[on_border]


def estimate_background(img: np.ndarray, fraction: float = 0.2) -> BackgroundModel:
    """Mode of the border pixels, and the std of the border pixels closest to it.

    Works per channel. The nearest ``fraction`` of border pixels (at least one)
    is chosen by absolute distance to the mode, ties going to scan order.
    """
    border = border_pixels(img)
    if border.ndim == 1:
        border = border[:, None]
    k = max(1, int(math.floor(fraction * border.shape[0])))
    modes, stds = [], []
    for ch in range(border.shape[1]):
        values = border[:, ch].astype(np.int64)
        mode = int(np.argmax(np.bincount(values, minlength=256)))
        nearest = np.argsort(np.abs(values - mode), kind="stable")[:k]
        modes.append(mode)
        stds.append(float(values[nearest].std()))
    return BackgroundModel(tuple(modes), tuple(stds))


def pad_to_square(img: np.ndarray, bg: BackgroundModel, rng: np.random.Generator | None = None,
                  noise: bool = True) -> np.ndarray:
    """Center the image on a square canvas filled with background-colored noise.

    Original pixels are copied unchanged. With ``noise=False`` (or zero std) the
    fill is the constant mode color.
    """
    img = _check_raw(img)
    h, w = img.shape[:2]
    side = max(h, w)
    if h == w:
        return img.copy()
    channels = 1 if img.ndim == 2 else img.shape[2]
    canvas = np.empty((side, side, channels), dtype=np.uint8)
    for ch in range(channels):
        mode, std = bg.mode_color[ch], bg.noise_std[ch]
        if noise and std > 0:
            if rng is None:
                raise ValueError("noise padding needs an rng")
            fill = np.rint(np.clip(rng.normal(mode, std, (side, side)), 0, 255))
            canvas[:, :, ch] = fill.astype(np.uint8)
        else:
            canvas[:, :, ch] = mode
    top, left = (side - h) // 2, (side - w) // 2
    canvas[top:top + h, left:left + w] = img.reshape(h, w, channels)
    return canvas[:, :, 0] if img.ndim == 2 else canvas


def crop_rect(img: np.ndarray, box: tuple[int, int, int, int] | None) -> np.ndarray:
    """Keep ``img[top:bottom, left:right]`` for a (left, top, right, bottom) box."""
    if box is None:
        return img
    left, top, right, bottom = box
    return img[top:bottom, left:right]


def preprocess(img: np.ndarray, rng: np.random.Generator | None, noise: bool = True,
               box: tuple[int, int, int, int] | None = None) -> np.ndarray:
    img = crop_rect(_check_raw(img), box)
    return pad_to_square(img, estimate_background(img), rng, noise)


# ---------------------------------------------------------------------------
# transforms


def _resize(gray: np.ndarray, size: int, box=None) -> np.ndarray:
    """Bicubic resize of a float32 image (optionally of a (left, top, right, bottom) box)."""
    h, w = gray.shape
    if box is None:
        box = (0, 0, w, h)
    left, top, right, bottom = box
    if right - left == size and bottom - top == size:
        return np.ascontiguousarray(gray[top:bottom, left:right], dtype=np.float32)
    im = Image.fromarray(np.ascontiguousarray(gray, dtype=np.float32))
    return np.asarray(im.resize((size, size), Image.BICUBIC, box=box), dtype=np.float32)


def to_working(img: np.ndarray, working_size: int) -> np.ndarray:
    """Grayscale, scale to [0, 1], resize to a working_size square."""
    gray = to_grayscale(img).astype(np.float32) / np.float32(255.0)
    return _resize(gray, working_size)


def sample_crop_box(height: int, width: int, scale: tuple[float, float], ratio: tuple[float, float],
                    rng: np.random.Generator, attempts: int = 10) -> tuple[int, int, int, int]:
    """Random area-scaled crop with log-uniform aspect jitter; whole image after failed attempts."""
    lo, hi = scale
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"crop scale range must lie in (0, 1], got {scale}")
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = area * rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return left, top, left + w, top + h
    side = min(height, width)
    top, left = (height - side) // 2, (width - side) // 2
    return left, top, left + side, top + side


def train_augment(img: np.ndarray, out_size: int, crop_scale_range: tuple[float, float],
                  stats: DatasetStats, rng: np.random.Generator, working_size: int = 256,
                  ratio_range: tuple[float, float] = (3 / 4, 4 / 3), flip_prob: float = 0.5) -> np.ndarray:
    work = to_working(img, working_size)
    box = sample_crop_box(working_size, working_size, crop_scale_range, ratio_range, rng)
    out = _resize(work, out_size, box)
    if rng.random() < flip_prob:
        out = out[:, ::-1]
    if rng.random() < flip_prob:
        out = out[::-1, :]
    return standardize(out, stats)[None]


def eval_transform(img: np.ndarray, out_size: int, stats: DatasetStats, working_size: int = 256) -> np.ndarray:
    work = to_working(img, working_size)
    if out_size > working_size:
        raise ValueError("out_size exceeds working size")
    off = (working_size - out_size) // 2
    out = work[off:off + out_size, off:off + out_size]
    return standardize(out, stats)[None]


def standardize(x: np.ndarray, stats: DatasetStats) -> np.ndarray:
    return ((x - np.float32(stats.mean)) / np.float32(stats.std)).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset statistics


def compute_dataset_stats(images: Iterable[np.ndarray], working_size: int = 256) -> DatasetStats:
    """Streaming pixel mean/std over preprocessed images, merged image by image.

    ``images`` yields already padded uint8 images; each is grayscaled, resized to
    the working size and scaled to [0, 1] before accumulation.
    """
    count = 0
    mean = 0.0
    m2 = 0.0
    for img in images:
        x = to_working(img, working_size).astype(np.float64)
        n = x.size
        mu = x.mean()
        ss = ((x - mu) ** 2).sum()
        total = count + n
        delta = mu - mean
        mean += delta * n / total
        m2 += ss + delta * delta * count * n / total
        count = total
    if count == 0:
        raise ConfigurationError("cannot compute statistics of an empty image set")
    std = math.sqrt(m2 / count)
    if std < STD_FLOOR:
        raise ConfigurationError(f"dataset std {std:.3g} is below {STD_FLOOR:g}; images are constant")
    return DatasetStats(float(mean), float(std))
