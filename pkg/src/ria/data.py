"""Datasets: a seeded synthetic shapes generator and an image-folder loader.

The synthetic set pairs each class with a distinct shape and color family,
drawn at a random position and scale over a textured background, and ships
exact foreground masks and tight boxes. It stands in for localization-
annotated photo datasets at a scale where training runs finish in minutes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from .boxes import Box
from .errors import ConfigurationError, DataError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
MASK_SUFFIX = ".mask.png"


@dataclass
class Sample:
    """One image with its label; mask and box are present when known."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int
    image_id: str
    mask: Optional[np.ndarray] = None  # (H, W) bool
    box: Optional[Box] = None


@dataclass
class Dataset:
    samples: list
    num_classes: int
    image_size: int
    ident: str

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


# --- shape rasterizers -------------------------------------------------------
# Each predicate takes coordinates normalized to [-1, 1] over the shape's
# square footprint and returns the filled-pixel mask.

def _circle(x, y):
    return x * x + y * y <= 1.0


def _square(x, y):
    return np.maximum(np.abs(x), np.abs(y)) <= 1.0


def _triangle(x, y):
    return np.abs(x) <= (y + 1.0) / 2.0


def _diamond(x, y):
    return np.abs(x) + np.abs(y) <= 1.0


def _ring(x, y):
    r2 = x * x + y * y
    return (r2 <= 1.0) & (r2 >= 0.55 * 0.55)


def _plus(x, y):
    return (np.abs(x) <= 0.34) | (np.abs(y) <= 0.34)


def _hbar(x, y):
    return np.abs(y) <= 0.34


def _vbar(x, y):
    return np.abs(x) <= 0.34


def _frame(x, y):
    m = np.maximum(np.abs(x), np.abs(y))
    return (m <= 1.0) & (m >= 0.55)


def _xcross(x, y):
    t = 0.34 * np.sqrt(2.0)
    return (np.abs(x - y) <= t) | (np.abs(x + y) <= t)


SHAPES = [_circle, _square, _triangle, _diamond, _ring,
          _plus, _hbar, _vbar, _frame, _xcross]
SHAPE_NAMES = ["circle", "square", "triangle", "diamond", "ring",
               "plus", "hbar", "vbar", "frame", "xcross"]
CLASS_HUES = [0.00, 0.08, 0.17, 0.30, 0.45, 0.55, 0.62, 0.75, 0.85, 0.95]


def _resize_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain separable bilinear resize used for the background texture."""
    h, w = grid.shape
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


# Strength of the class-correlated background tint. A nonzero default makes
# the background a usable (spurious) class cue: models trained on accuracy
# alone tend to spread attention over it, which is the failure mode
# attention-box supervision is meant to correct, and what the paired
# baseline/RIA comparisons measure.
DEFAULT_BACKGROUND_BIAS = 0.3


def _background(rng: np.random.Generator, size: int, kind: str,
                label: Optional[int] = None, bias: float = 0.0) -> np.ndarray:
    base = rng.uniform(0.25, 0.65)
    tint = rng.uniform(-0.06, 0.06, size=3)
    color = np.clip(base + tint, 0.0, 1.0)
    if label is not None and bias > 0:
        hue = (CLASS_HUES[label % len(CLASS_HUES)] + rng.uniform(-0.02, 0.02)) % 1.0
        cue = hsv_to_rgb(np.array([hue, 0.5, 0.55]))
        color = (1.0 - bias) * color + bias * cue
    canvas = color[None, None, :] * np.ones((size, size, 3))
    if kind == "blotch":
        coarse = rng.normal(0.0, 0.09, size=(size // 8 + 1, size // 8 + 1))
        canvas += _resize_bilinear(coarse, size, size)[:, :, None]
    elif kind != "plain":
        raise ConfigurationError(f"unknown background kind {kind!r}")
    canvas += rng.normal(0.0, 0.02, size=canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


def _foreground_color(rng: np.random.Generator, label: int) -> np.ndarray:
    hue = (CLASS_HUES[label % len(CLASS_HUES)] + rng.uniform(-0.03, 0.03)) % 1.0
    sat = rng.uniform(0.70, 0.95)
    val = rng.uniform(0.75, 0.95)
    return hsv_to_rgb(np.array([hue, sat, val]))


def generate_synthetic_dataset(num_classes: int = 10, per_class: int = 200,
                               image_size: int = 64, seed: int = 0,
                               background: str = "blotch",
                               background_bias: float = DEFAULT_BACKGROUND_BIAS) -> Dataset:
    """Seeded shapes-on-texture dataset with ground-truth masks and boxes.

    Class c draws shape SHAPES[c % 10] in color family CLASS_HUES[c % 10] at a
    random position and scale. background_bias > 0 additionally tints each
    background toward the class color, planting a diffuse spurious cue; 0
    gives class-independent backgrounds. The same seed reproduces the dataset
    pixel for pixel.
    """
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    if image_size < 16:
        raise ConfigurationError(f"image_size must be >= 16, got {image_size}")
    rng = np.random.default_rng(seed)
    samples = []
    for label in range(num_classes):
        shape = SHAPES[label % len(SHAPES)]
        for i in range(per_class):
            img = _background(rng, image_size, background, label, background_bias)
            s = int(rng.uniform(0.28, 0.55) * image_size)
            s = max(s, 8)
            x0 = int(rng.integers(1, image_size - s - 1))
            y0 = int(rng.integers(1, image_size - s - 1))
            # local coordinates over the shape footprint, in [-1, 1]
            ax = (np.arange(s) + 0.5) / s * 2.0 - 1.0
            lx, ly = np.meshgrid(ax, ax)
            local = shape(lx, ly)
            mask = np.zeros((image_size, image_size), dtype=bool)
            mask[y0 : y0 + s, x0 : x0 + s] = local
            color = _foreground_color(rng, label)
            shading = rng.normal(0.0, 0.02, size=(int(local.sum()), 3))
            img[mask] = np.clip(color[None, :] + shading, 0.0, 1.0)
            ys, xs = np.nonzero(mask)
            box = Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
            samples.append(
                Sample(
                    image=img.astype(np.float32),
                    label=label,
                    image_id=f"c{label:02d}_{i:05d}",
                    mask=mask,
                    box=box,
                )
            )
    ident = (f"synthetic(classes={num_classes},per_class={per_class},"
             f"size={image_size},seed={seed},bias={background_bias:g})")
    return Dataset(samples=samples, num_classes=num_classes, image_size=image_size, ident=ident)


def save_dataset_folder(dataset: Dataset, path) -> None:
    """Write a dataset as class_<label>/ PNG files plus .mask.png sidecars."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for sample in dataset:
        cls_dir = root / f"class_{sample.label:02d}"
        cls_dir.mkdir(exist_ok=True)
        stem = sample.image_id.replace("/", "_")
        Image.fromarray((sample.image * 255).round().astype(np.uint8)).save(
            cls_dir / f"{stem}.png"
        )
        if sample.mask is not None:
            Image.fromarray((sample.mask * 255).astype(np.uint8)).save(
                cls_dir / f"{stem}{MASK_SUFFIX}"
            )


def _is_mask_file(p: Path) -> bool:
    return p.name.endswith(MASK_SUFFIX)


def load_image_folder(path) -> Dataset:
    """Load one-subdirectory-per-class images, with optional mask sidecars.

    Labels follow the sorted order of class directories; image ids are paths
    relative to the root, stable across runs. Unreadable images are skipped
    with a warning, an empty class directory is an error.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset folder {root} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    samples = []
    image_size = None
    for label, cls_dir in enumerate(class_dirs):
        files = sorted(
            p for p in cls_dir.iterdir()
            if p.suffix.lower() in IMAGE_SUFFIXES and not _is_mask_file(p)
        )
        loaded = 0
        for p in files:
            try:
                img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
            except Exception as exc:  # skip corrupt files, keep the rest
                logger.warning("skipping unreadable image %s (%s)", p, exc)
                continue
            mask = None
            box = None
            mask_path = p.with_name(p.stem + MASK_SUFFIX)
            if mask_path.exists():
                m = np.asarray(Image.open(mask_path).convert("L"))
                mask = m > 127
                if mask.any():
                    ys, xs = np.nonzero(mask)
                    box = Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
            samples.append(
                Sample(
                    image=img,
                    label=label,
                    image_id=p.relative_to(root).as_posix(),
                    mask=mask,
                    box=box,
                )
            )
            loaded += 1
            if image_size is None:
                image_size = img.shape[0]
        if loaded == 0:
            raise ConfigurationError(f"class directory {cls_dir} has no readable images")
    return Dataset(
        samples=samples,
        num_classes=len(class_dirs),
        image_size=image_size or 0,
        ident=str(root),
    )


def stratified_split(dataset: Dataset, val_fraction: float = 0.2,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Per-class seeded shuffle, then the first val_fraction of each class goes to val."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list] = {}
    for sample in dataset:
        by_class.setdefault(sample.label, []).append(sample)
    train, val = [], []
    for label in sorted(by_class):
        group = by_class[label]
        order = rng.permutation(len(group))
        n_val = max(1, int(round(len(group) * val_fraction)))
        for j, idx in enumerate(order):
            (val if j < n_val else train).append(group[idx])
    mk = lambda part, name: Dataset(
        samples=part,
        num_classes=dataset.num_classes,
        image_size=dataset.image_size,
        ident=f"{dataset.ident}#{name}",
    )
    return mk(train, "train"), mk(val, "val")


def to_batch(samples) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into model-ready (N, 3, H, W) images and label tensors."""
    images = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return torch.from_numpy(images.copy()), torch.from_numpy(labels)
