"""Datasets: synthetic part-structured glyph images, raster directories, zero-shot
class splits and the class-balanced batch sampler."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .errors import ConfigError
from .imaging import bilinear_resize, read_pixmap, write_pixmap

GLYPH_SIZE = 5
PARTS_PER_CLASS = 3
NOISE_AMPLITUDE = 0.2
GLYPH_CONTRAST = 0.3
PIXMAP_SUFFIXES = (".pgm", ".ppm", ".pnm")

_GLYPH_ART = {
    "plus": ["..#..", "..#..", "#####", "..#..", "..#.."],
    "cross": ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    "box": ["#####", "#...#", "#...#", "#...#", "#####"],
    "tee": ["#####", "..#..", "..#..", "..#..", "..#.."],
    "ell": ["#....", "#....", "#....", "#....", "#####"],
    "bars": ["#.#.#", "#.#.#", "#.#.#", "#.#.#", "#.#.#"],
    "diag": ["#....", ".#...", "..#..", "...#.", "....#"],
    "checker": ["#.#.#", ".#.#.", "#.#.#", ".#.#.", "#.#.#"],
    "diamond": ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],
    "cup": ["#...#", "#...#", "#...#", "#...#", "#####"],
    "block": [".....", ".###.", ".###.", ".###.", "....."],
    "zed": ["#####", "...#.", "..#..", ".#...", "#####"],
}
GLYPH_NAMES = tuple(_GLYPH_ART)
GLYPHS = np.array([[[ch == "#" for ch in row] for row in art] for art in _GLYPH_ART.values()])


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, C] in [0, 1]
    labels: np.ndarray  # [N] integer class ids
    class_names: list  # class_names[id]
    class_glyphs: dict = field(default_factory=dict)  # class id -> glyph ids (synthetic data only)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigError(f"images {self.images.shape} and labels {self.labels.shape} do not line up")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        kept = set(self.labels[indices].tolist())
        glyphs = {c: g for c, g in self.class_glyphs.items() if c in kept}
        return Dataset(self.images[indices], self.labels[indices], self.class_names, glyphs)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _cyclic_gap(a: int, b: int, size: int) -> int:
    d = abs(a - b) % size
    return min(d, size - d)


def place_glyphs(rng: np.random.Generator, image_size: int, count: int, max_tries: int = 10_000) -> list:
    """Top-left corners for ``count`` glyphs whose (cyclically wrapped) footprints
    neither overlap nor touch."""
    need = GLYPH_SIZE + 1
    positions: list = []
    for _ in range(max_tries):
        if len(positions) == count:
            return positions
        y, x = (int(v) for v in rng.integers(0, image_size, size=2))
        if all(_cyclic_gap(y, py, image_size) >= need or _cyclic_gap(x, px, image_size) >= need
               for py, px in positions):
            positions.append((y, x))
    if len(positions) == count:
        return positions
    raise ConfigError(f"cannot place {count} glyphs without overlap in a {image_size}x{image_size} image")


def glyph_mask(glyph_ids, positions, image_size: int) -> np.ndarray:
    """Boolean ``[S, S]`` mask of glyph pixels, wrapping around the borders."""
    mask = np.zeros((image_size, image_size), dtype=bool)
    rows = np.arange(GLYPH_SIZE)
    for g, (y, x) in zip(glyph_ids, positions):
        mask[np.ix_((y + rows) % image_size, (x + rows) % image_size)] |= GLYPHS[g]
    return mask


def render_image(glyph_ids, positions, noise: np.ndarray, contrast: float = GLYPH_CONTRAST) -> np.ndarray:
    """Glyph pixels are lifted by ``contrast`` above the noise, clipped to 1."""
    mask = glyph_mask(glyph_ids, positions, noise.shape[0])
    return np.minimum(noise + contrast * mask, 1.0)


def generate_synthetic(n_classes: int = 40, imgs_per_class: int = 64, image_size: int = 32, seed: int = 0,
                       contrast: float = GLYPH_CONTRAST) -> Dataset:
    """Each class is a fixed set of three glyphs; every image scatters those glyphs
    at random cyclic positions over uniform noise of amplitude 0.2."""
    if n_classes < 4:
        raise ConfigError(f"need at least 4 classes, got {n_classes}")
    if image_size < 16:
        raise ConfigError(f"image_size must be at least 16, got {image_size}")
    if not 0.0 < contrast <= 1.0:
        raise ConfigError(f"contrast must lie in (0, 1], got {contrast}")
    if imgs_per_class < 1:
        raise ConfigError(f"imgs_per_class must be positive, got {imgs_per_class}")
    combos = list(itertools.combinations(range(len(GLYPHS)), PARTS_PER_CLASS))
    if n_classes > len(combos):
        raise ConfigError(
            f"glyph alphabet exhausted: {len(GLYPHS)} glyphs give {len(combos)} classes of "
            f"{PARTS_PER_CLASS} parts, {n_classes} requested"
        )
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(combos), size=n_classes, replace=False).tolist())
    class_glyphs = {c: combos[k] for c, k in enumerate(chosen)}

    images = np.empty((n_classes * imgs_per_class, image_size, image_size, 1))
    labels = np.repeat(np.arange(n_classes), imgs_per_class)
    for n, c in enumerate(labels):
        positions = place_glyphs(rng, image_size, PARTS_PER_CLASS)
        noise = rng.uniform(0.0, NOISE_AMPLITUDE, size=(image_size, image_size))
        images[n, :, :, 0] = render_image(class_glyphs[c], positions, noise, contrast)
    names = [f"class_{c:03d}" for c in range(n_classes)]
    return Dataset(images, labels, names, class_glyphs)


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write ``out_dir/<class_name>/<n>.pgm`` rasters plus ``manifest.txt``.

    Manifest lines are tab-separated: relative path, class id, comma-joined
    glyph names (``-`` when unknown).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    counters: dict = {}
    suffix = ".pgm" if dataset.images.shape[-1] == 1 else ".ppm"
    for image, label in zip(dataset.images, dataset.labels):
        label = int(label)
        name = dataset.class_names[label]
        k = counters.get(label, 0)
        counters[label] = k + 1
        rel = Path(name) / f"{k:04d}{suffix}"
        (out_dir / name).mkdir(exist_ok=True)
        write_pixmap(out_dir / rel, image)
        glyphs = dataset.class_glyphs.get(label)
        tag = ",".join(GLYPH_NAMES[g] for g in glyphs) if glyphs else "-"
        lines.append(f"{rel.as_posix()}\t{label}\t{tag}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# raster directories
# ---------------------------------------------------------------------------

def _to_channels(image: np.ndarray, channels: int) -> np.ndarray:
    if image.shape[-1] == channels:
        return image
    if channels == 3:
        return np.repeat(image, 3, axis=-1)
    return image.mean(axis=-1, keepdims=True)


def load_raster_dir(root, image_size: int = 32, channels: Optional[int] = None) -> Dataset:
    """Load ``root/<class_name>/*.{pgm,ppm,pnm}``; class ids follow sorted class names.

    Images are bilinearly resized to ``image_size`` square. ``channels=None``
    keeps the channel count of the first file read.
    """
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    if not class_dirs:
        raise ConfigError(f"{root}: no class directories found")
    images, labels = [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in PIXMAP_SUFFIXES)
        if not files:
            raise ConfigError(f"{cdir}: class directory contains no pixmap files")
        for f in files:
            img = read_pixmap(f)
            if channels is None:
                channels = img.shape[-1]
            img = _to_channels(img, channels)
            if img.shape[:2] != (image_size, image_size):
                img = bilinear_resize(img, image_size, image_size)
            images.append(img)
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels), [p.name for p in class_dirs])


# ---------------------------------------------------------------------------
# zero-shot split and batching
# ---------------------------------------------------------------------------

def split_zero_shot(dataset: Dataset, train_fraction: float = 0.5, seed: int = 0) -> tuple:
    """Partition classes: the first ``ceil(fraction * n)`` of a seeded shuffle train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    classes = dataset.classes
    if len(classes) < 2:
        raise ConfigError(f"need at least 2 classes to split, got {len(classes)}")
    n_train = math.ceil(train_fraction * len(classes))
    if n_train >= len(classes):
        raise ConfigError(f"train_fraction {train_fraction} leaves no test classes out of {len(classes)}")
    order = np.random.default_rng(seed).permutation(classes)
    train_classes = np.sort(order[:n_train])
    in_train = np.isin(dataset.labels, train_classes)
    return dataset.subset(np.flatnonzero(in_train)), dataset.subset(np.flatnonzero(~in_train))


@dataclass(frozen=True)
class SamplerConfig:
    classes_per_batch: int = 56
    samples_per_class: int = 2
    seed: int = 0

    @property
    def batch_size(self) -> int:
        return self.classes_per_batch * self.samples_per_class


class LabeledBatch(NamedTuple):
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


class ClassBalancedSampler:
    """Draws ``classes_per_batch`` distinct classes, then ``samples_per_class``
    distinct images of each. Batch ``k`` depends only on (seed, k)."""

    def __init__(self, dataset: Dataset, config: SamplerConfig, augment: bool = False, step: int = 0):
        if config.classes_per_batch < 1 or config.samples_per_class < 1:
            raise ConfigError(f"invalid sampler config {config}")
        self.dataset = dataset
        self.config = config
        self.augment = augment
        self.step = step
        self.classes = dataset.classes
        if config.classes_per_batch > len(self.classes):
            raise ConfigError(
                f"classes_per_batch={config.classes_per_batch} exceeds the {len(self.classes)} available classes"
            )
        self.by_class = {int(c): np.flatnonzero(dataset.labels == c) for c in self.classes}
        short = [c for c, idx in self.by_class.items() if len(idx) < config.samples_per_class]
        if short:
            raise ConfigError(f"classes {short} have fewer than {config.samples_per_class} images")

    def batch_indices(self, step: int) -> np.ndarray:
        rng = np.random.default_rng([self.config.seed, step])
        picked = rng.choice(self.classes, size=self.config.classes_per_batch, replace=False)
        return np.concatenate(
            [rng.choice(self.by_class[int(c)], size=self.config.samples_per_class, replace=False) for c in picked]
        )

    def batch(self, step: int) -> LabeledBatch:
        idx = self.batch_indices(step)
        images = self.dataset.images[idx]
        if self.augment:
            flip = np.random.default_rng([self.config.seed, step, 1]).random(len(idx)) < 0.5
            images = np.where(flip[:, None, None, None], images[:, :, ::-1], images)
        return LabeledBatch(images, self.dataset.labels[idx], idx)

    def next_batch(self) -> LabeledBatch:
        out = self.batch(self.step)
        self.step += 1
        return out
