"""Attention heatmaps: fold, upsample, rank exemplars, export overlays."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionError, FileError, UsageError
from .imaging import bilinear_resize, write_pixmap

logger = logging.getLogger(__name__)

STATISTICS = ("max", "mean")


def unfold_tensor(x: np.ndarray) -> np.ndarray:
    """``[H, W, C]`` -> ``[C, HW]``; column ``j`` is position ``(j // W, j % W)``."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"unfold expects [H, W, C], got {x.shape}")
    h, w, c = x.shape
    return x.reshape(h * w, c).T.copy()


def fold_attention(attention: np.ndarray, height: int, width: int) -> np.ndarray:
    """``[P, HW]`` -> ``[H, W, P]``, the inverse of :func:`unfold_tensor`."""
    attention = np.asarray(attention)
    if attention.ndim != 2 or attention.shape[1] != height * width:
        raise DimensionError(f"cannot fold attention {attention.shape} into {height}x{width}")
    return attention.T.reshape(height, width, attention.shape[0]).copy()


def bilinear_upsample(heat: np.ndarray, height: int, width: int) -> np.ndarray:
    heat = np.asarray(heat, dtype=np.float64)
    if heat.ndim != 2:
        raise DimensionError(f"expected a 2-D map, got {heat.shape}")
    if height < heat.shape[0] or width < heat.shape[1]:
        raise UsageError(f"target {height}x{width} is smaller than map {heat.shape[0]}x{heat.shape[1]}")
    return bilinear_resize(heat, height, width)


def group_heatmaps(attention: np.ndarray, feature_hw: tuple, image_hw: tuple) -> np.ndarray:
    """One image's ``[P, HW]`` attention -> ``[P, H', W']`` raw upsampled maps."""
    folded = fold_attention(attention, *feature_hw)
    return np.stack([bilinear_upsample(folded[..., p], *image_hw) for p in range(folded.shape[-1])])


def exemplar_statistic(attention: np.ndarray, group: int, statistic: str = "max") -> np.ndarray:
    """Per-image ranking statistic of group ``group`` over cached maps ``[N, P, HW]``."""
    attention = np.asarray(attention)
    if attention.ndim != 3:
        raise DimensionError(f"expected cached attention [N, P, HW], got {attention.shape}")
    if not 0 <= group < attention.shape[1]:
        raise UsageError(f"group {group} out of range for {attention.shape[1]} groups")
    if statistic not in STATISTICS:
        raise UsageError(f"statistic must be one of {STATISTICS}, got {statistic!r}")
    maps = attention[:, group, :]
    return maps.max(axis=1) if statistic == "max" else maps.mean(axis=1)


def select_top_exemplars(attention: np.ndarray, group: int, count: int = 12, statistic: str = "max") -> tuple:
    """Indices of the ``count`` images whose group map scores highest
    (descending, ties by lower index) and their scores."""
    scores = exemplar_statistic(attention, group, statistic)
    if count < 1:
        raise UsageError(f"count must be positive, got {count}")
    if count > len(scores):
        logger.warning("requested %d exemplars but only %d images; clipping", count, len(scores))
        count = len(scores)
    order = np.argsort(-scores, kind="stable")[:count]
    return order, scores[order]


def overlay_raster(image: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """Blend a grayscale base with a red heat channel: R = (base + heat)/2, G = B = base/2.

    ``heat`` is divided by its maximum first (display renormalisation)."""
    image = np.asarray(image, dtype=np.float64)
    base = image.mean(axis=-1) if image.ndim == 3 else image
    heat = np.asarray(heat, dtype=np.float64)
    if heat.shape != base.shape:
        raise DimensionError(f"heatmap {heat.shape} does not match image {base.shape}")
    peak = heat.max()
    shown = heat / peak if peak > 0 else np.zeros_like(heat)
    out = np.empty(base.shape + (3,))
    out[..., 0] = 0.5 * base + 0.5 * shown
    out[..., 1] = 0.5 * base
    out[..., 2] = 0.5 * base
    return out


def export_overlay(image: np.ndarray, heat: np.ndarray, path) -> Path:
    path = Path(path)
    try:
        write_pixmap(path, overlay_raster(image, heat))
    except OSError as exc:
        raise FileError(f"{path}: cannot write overlay ({exc.strerror})") from exc
    return path


@dataclass(frozen=True)
class ExportedOverlay:
    path: Path
    group: int
    rank: int
    image_id: int
    score: float


def export_group_exemplars(images: np.ndarray, attention: np.ndarray, group: int, out_dir, *,
                           count: int = 12, statistic: str = "max", split: str = "test",
                           feature_hw: Optional[tuple] = None) -> list:
    """Write ``<split>_<group>_<rank>_<imageid>.ppm`` for the top exemplars of one group."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image_hw = images.shape[1:3]
    feature_hw = feature_hw or image_hw
    order, scores = select_top_exemplars(attention, group, count, statistic)
    exported = []
    for rank, (idx, score) in enumerate(zip(order.tolist(), scores.tolist())):
        heat = group_heatmaps(attention[idx], feature_hw, image_hw)[group]
        path = export_overlay(images[idx], heat, out_dir / f"{split}_{group}_{rank}_{idx}.ppm")
        exported.append(ExportedOverlay(path, group, rank, idx, score))
    return exported


def write_index(exported: list, path, statistic: str = "max") -> Path:
    """Tab-separated manifest: file, group, rank, image id, ranking statistic."""
    path = Path(path)
    lines = [f"# file\tgroup\trank\timage_id\t{statistic}"]
    lines += [f"{e.path.name}\t{e.group}\t{e.rank}\t{e.image_id}\t{e.score!r}" for e in exported]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise FileError(f"{path}: cannot write index ({exc.strerror})") from exc
    return path
