"""Shared model-evaluation helpers: batched prediction, accuracy, and the
explanation-quality score (overlap of the Grad-CAM hard box with the
ground-truth box)."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch

from .boxes import heatmap_box
from .data import to_batch
from .gradcam import gradcam_batch
from .losses import iou


def predict(model, samples, batch_size: int = 256) -> np.ndarray:
    """Top-1 class per sample, evaluated without gradients."""
    preds = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            images, _ = to_batch(samples[start : start + batch_size])
            preds.append(model(images).argmax(dim=1).numpy())
    return np.concatenate(preds) if preds else np.array([], dtype=np.int64)


def accuracy(model, samples, batch_size: int = 256) -> float:
    labels = np.array([s.label for s in samples])
    return float((predict(model, samples, batch_size) == labels).mean())


def gradcam_box_iou(model, samples, threshold: float = 0.5,
                    batch_size: int = 64) -> np.ndarray:
    """Per-sample IoU between the Grad-CAM hard box and the ground-truth box.

    Samples without a ground-truth box are skipped (returned array only covers
    the ones that have one); a heatmap that yields no box counts as IoU 0.
    """
    scored = [s for s in samples if s.box is not None]
    out = []
    for start in range(0, len(scored), batch_size):
        chunk = scored[start : start + batch_size]
        images, _ = to_batch(chunk)
        heatmaps, _, _ = gradcam_batch(model, images)
        for hm, sample in zip(heatmaps, chunk):
            pred_box = heatmap_box(hm.numpy(), threshold)
            out.append(0.0 if pred_box is None else iou(pred_box, sample.box))
    return np.array(out)


def mean_gradcam_box_iou(model, samples, threshold: float = 0.5,
                         batch_size: int = 64) -> float:
    values = gradcam_box_iou(model, samples, threshold, batch_size)
    return float(values.mean()) if len(values) else 0.0
