"""Grad-CAM heatmaps from captured activations and gradients.

Channel importances are the spatial mean of the class-logit gradient at the
capture stage; the heatmap is the ReLU of the importance-weighted sum of
activation channels, bilinearly upsampled to input resolution (half-pixel
centers) and normalized to [0, 1] by its maximum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError
from .models import CapturedActivations, ConvClassifier, backward_capture, forward_with_capture

NORM_EPS = 1e-8


@dataclass
class Heatmap:
    """Normalized saliency map aligned with input-image pixels.

    values is a (H, W) float array in [0, 1]; unless the raw map was
    identically zero its maximum is 1. source_size records the pre-upsample
    spatial shape of the capture stage.
    """

    values: np.ndarray
    class_index: int
    source_size: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _grads_of(captured) -> torch.Tensor:
    if isinstance(captured, CapturedActivations):
        if captured.gradients is None:
            raise InputError("captured gradients are empty; run backward_capture first")
        return captured.gradients
    return captured


def channel_weights(captured) -> torch.Tensor:
    """Per-channel importance: gradients averaged over all spatial locations.

    Accepts CapturedActivations (with gradients filled) or a raw (N, K, H, W)
    gradient tensor; returns (N, K).
    """
    grads = _grads_of(captured)
    return grads.mean(dim=(2, 3))


def raw_heatmap(captured, weights: torch.Tensor) -> torch.Tensor:
    """ReLU of the weighted sum of activation channels; shape (N, H', W')."""
    acts = captured.activations if isinstance(captured, CapturedActivations) else captured
    if weights.shape != acts.shape[:2]:
        raise InputError(
            f"weights shape {tuple(weights.shape)} does not match activations "
            f"{tuple(acts.shape)}"
        )
    return F.relu((weights[:, :, None, None] * acts).sum(dim=1))


def upsample_normalize(raw: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsample to target (H, W), then scale so the per-map maximum is 1.

    Identically-zero maps stay zero thanks to the epsilon in the denominator.
    Accepts (H', W') or (N, H', W') and preserves the batch dimension.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise InputError(f"target size must be at least 1x1, got {target}")
    single = raw.ndim == 2
    if single:
        raw = raw.unsqueeze(0)
    if raw.ndim != 3:
        raise InputError(f"expected (N, H, W) raw maps, got shape {tuple(raw.shape)}")
    up = F.interpolate(raw.unsqueeze(1), size=(th, tw), mode="bilinear",
                       align_corners=False).squeeze(1)
    peak = up.amax(dim=(1, 2), keepdim=True)
    out = up / (peak + NORM_EPS)
    return out.squeeze(0) if single else out


def heatmaps_from_capture(logits: torch.Tensor, captured: CapturedActivations,
                          class_indices, target: tuple[int, int],
                          create_graph: bool = False) -> torch.Tensor:
    """Backward-capture, weight, combine, upsample: heatmaps for a live capture.

    Used by the training loop, which has already run forward_with_capture.
    """
    backward_capture(logits, captured, class_indices, create_graph=create_graph)
    raw = raw_heatmap(captured, channel_weights(captured))
    return upsample_normalize(raw, target)


def gradcam_batch(model: ConvClassifier, images: torch.Tensor,
                  class_indices: Optional[torch.Tensor] = None,
                  create_graph: bool = False):
    """Heatmaps for a whole batch in one forward/backward pass.

    class_indices defaults to each sample's top-1 prediction. With
    create_graph=True the heatmaps remain differentiable with respect to the
    model parameters, which is what the training loss needs.

    Returns:
        (heatmaps, class_indices, logits): heatmaps is (N, H, W) on the input
        resolution, normalized per sample.
    """
    with torch.enable_grad():
        logits, captured = forward_with_capture(model, images)
        if class_indices is None:
            class_indices = logits.argmax(dim=1).detach()
        heatmaps = heatmaps_from_capture(logits, captured, class_indices,
                                         images.shape[2:], create_graph=create_graph)
    if not create_graph:
        heatmaps = heatmaps.detach()
    return heatmaps, captured.class_index, logits.detach()


def _to_image_tensor(image, model: ConvClassifier) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        t = image.detach().to(torch.float32)
    else:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 3 and arr.shape[2] == model.config.in_channels:
            arr = arr.transpose(2, 0, 1)  # HWC -> CHW
        t = torch.from_numpy(arr.copy())
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise InputError(f"cannot interpret image with shape {tuple(t.shape)}")
    return t


def gradcam(model: ConvClassifier, image,
            class_choice: Union[str, int] = "top-1") -> Heatmap:
    """Full Grad-CAM pipeline for one image.

    image may be a (H, W, C) array in [0, 1], a CHW tensor, or a 1-sample
    batch. class_choice is "top-1" (default) or an explicit class index.
    """
    batch = _to_image_tensor(image, model)
    if batch.shape[0] != 1:
        raise InputError("gradcam explains one image at a time; use gradcam_batch")
    if isinstance(class_choice, str):
        if class_choice not in ("top-1", "top1"):
            raise InputError(f"unknown class choice {class_choice!r}")
        indices = None
    else:
        indices = torch.tensor([int(class_choice)])
    with torch.enable_grad():
        logits, captured = forward_with_capture(model, batch)
        if indices is None:
            indices = logits.argmax(dim=1).detach()
        backward_capture(logits, captured, indices)
        raw = raw_heatmap(captured, channel_weights(captured))
        heatmaps = upsample_normalize(raw, batch.shape[2:]).detach()
    return Heatmap(
        values=heatmaps[0].cpu().numpy(),
        class_index=int(captured.class_index[0]),
        source_size=(int(raw.shape[1]), int(raw.shape[2])),
    )
