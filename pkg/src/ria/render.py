"""Small rendering helpers for overlays and box drawings (file output only)."""

from __future__ import annotations

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .boxes import Box


def heatmap_overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blend a jet-colored heatmap over an image; returns uint8 RGB."""
    cmap = colormaps["jet"]
    colored = cmap(np.clip(heatmap, 0.0, 1.0))[..., :3]
    blended = (1.0 - alpha) * image + alpha * colored
    return (np.clip(blended, 0.0, 1.0) * 255).round().astype(np.uint8)


def draw_box(image_u8: np.ndarray, box: Box, color=(255, 255, 255), width: int = 1) -> np.ndarray:
    """Paint a box outline onto a uint8 RGB image (in place, also returned)."""
    h, w = image_u8.shape[:2]
    b = box.clip(h, w)
    col = np.array(color, dtype=np.uint8)
    for k in range(width):
        y0, y1 = min(b.y_min + k, h - 1), max(b.y_max - k, 0)
        x0, x1 = min(b.x_min + k, w - 1), max(b.x_max - k, 0)
        image_u8[y0, x0 : x1 + 1] = col
        image_u8[y1, x0 : x1 + 1] = col
        image_u8[y0 : y1 + 1, x0] = col
        image_u8[y0 : y1 + 1, x1] = col
    return image_u8


def save_png(image_u8: np.ndarray, path) -> None:
    Image.fromarray(image_u8).save(path)


def side_by_side(panels: list[np.ndarray], pad: int = 2) -> np.ndarray:
    """Concatenate same-height uint8 panels horizontally with a white gutter."""
    h = panels[0].shape[0]
    gutter = np.full((h, pad, 3), 255, dtype=np.uint8)
    row = []
    for i, p in enumerate(panels):
        if i:
            row.append(gutter)
        row.append(p)
    return np.concatenate(row, axis=1)


def stack_rows(rows: list[np.ndarray], pad: int = 2) -> np.ndarray:
    """Concatenate same-width uint8 rows vertically with a white gutter."""
    w = rows[0].shape[1]
    gutter = np.full((pad, w, 3), 255, dtype=np.uint8)
    out = []
    for i, r in enumerate(rows):
        if i:
            out.append(gutter)
        out.append(r)
    return np.concatenate(out, axis=0)
