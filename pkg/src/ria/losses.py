"""The attention-alignment objective and its building blocks.

Box overlap uses inclusive pixel areas (a 1-pixel box has area 1). The
modified overlap iou_hat keeps only the attention box's area in the
denominator, so it reaches 1 exactly when the attention box is contained in
the detector box. The hard loss ria_hard is evaluation-only; ria_soft is its
differentiable surrogate over the soft saliency mask and is the term that
actually trains the network, combined with cross-entropy by total_loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .boxes import SOFT_MASS_EPS, Box, soft_box_stats
from .errors import ConfigurationError


@dataclass
class LossConfig:
    """Weights and shape parameters of the combined objective.

    alpha and beta weight cross-entropy and the attention term; lam scales the
    diagonal size penalty; threshold is the saliency cut used on normalized
    heatmaps; tau and kappa shape the soft surrogate. diag_normalizer divides
    the diagonal penalty; None resolves to the image diagonal at use time so
    lam stays resolution-independent.
    """

    alpha: float = 1.0
    beta: float = 0.5
    lam: float = 0.1
    threshold: float = 0.5
    tau: float = 0.05
    kappa: float = math.sqrt(3.0)
    diag_normalizer: Optional[float] = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if self.lam < 0:
            raise ConfigurationError("lam must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.kappa <= 0:
            raise ConfigurationError(f"kappa must be positive, got {self.kappa}")

    def resolve_diag_normalizer(self, image_size: Optional[tuple[int, int]] = None) -> float:
        """Explicit value if set, else the diagonal of the given (H, W) image."""
        if self.diag_normalizer is not None:
            return float(self.diag_normalizer)
        if image_size is None:
            raise ConfigurationError(
                "diag_normalizer is unset and no image size was provided"
            )
        h, w = image_size
        return math.hypot(float(w), float(h))


@dataclass
class LossBreakdown:
    """Per-batch decomposition of the combined objective."""

    total: float
    ce: float
    ria: float
    iou_hat: float
    diag_penalty: float
    skipped_ria: tuple[bool, ...] = field(default_factory=tuple)

    @property
    def skip_rate(self) -> float:
        if not self.skipped_ria:
            return 0.0
        return sum(self.skipped_ria) / len(self.skipped_ria)


def _intersection_area(a: Box, b: Box) -> int:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    return max(w, 0) * max(h, 0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union on inclusive pixel areas; 0 for disjoint boxes."""
    inter = _intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union


def iou_hat(b_od: Box, b_gc: Box) -> float:
    """Overlap with only the attention box's area in the denominator.

    Always in [0, 1]; equals 1 exactly when b_gc lies inside b_od.
    """
    return _intersection_area(b_od, b_gc) / b_gc.area


def diag_penalty(b_gc: Box, cfg: LossConfig,
                 image_size: Optional[tuple[int, int]] = None) -> float:
    """Size penalty lam * diagonal(b_gc) / normalizer.

    Width and height are coordinate spans (x_max - x_min, y_max - y_min), so a
    single-pixel box has zero diagonal.
    """
    if cfg.lam == 0:
        return 0.0
    w = b_gc.x_max - b_gc.x_min
    h = b_gc.y_max - b_gc.y_min
    return cfg.lam * math.hypot(w, h) / cfg.resolve_diag_normalizer(image_size)


def ria_hard(b_od: Box, b_gc: Box, cfg: LossConfig,
             image_size: Optional[tuple[int, int]] = None) -> float:
    """Evaluation-only attention loss: 1 - iou_hat + diagonal penalty."""
    return 1.0 - iou_hat(b_od, b_gc) + diag_penalty(b_gc, cfg, image_size)


@dataclass
class SoftRiaTerms:
    """Differentiable pieces of one sample's attention loss."""

    loss: torch.Tensor
    soft_iou_hat: torch.Tensor
    soft_diag: torch.Tensor  # normalized diagonal, before lam


def _soft_losses(heatmaps: torch.Tensor, target_boxes: Sequence[Optional[Box]],
                 cfg: LossConfig):
    """Per-sample soft losses over a batch.

    Returns (loss_vec, iou_vec, diag_vec, valid) where the vectors cover only
    the valid samples, in batch order, and valid is the per-sample keep mask.
    A sample is invalid when its target box is None or its soft mass is
    degenerate.
    """
    if heatmaps.ndim != 3 or len(target_boxes) != heatmaps.shape[0]:
        raise ConfigurationError("heatmaps must be (N, H, W) with one target box per sample")
    n, h, w = heatmaps.shape
    stats = soft_box_stats(heatmaps, cfg.tau, cfg.threshold)
    normalizer = cfg.resolve_diag_normalizer((h, w))
    kx = cfg.kappa * stats.sigma_x
    ky = cfg.kappa * stats.sigma_y
    x0 = torch.clamp(stats.mu_x - kx, 0.0, w - 1.0)
    x1 = torch.clamp(stats.mu_x + kx, 0.0, w - 1.0)
    y0 = torch.clamp(stats.mu_y - ky, 0.0, h - 1.0)
    y1 = torch.clamp(stats.mu_y + ky, 0.0, h - 1.0)
    diag = torch.sqrt((x1 - x0) ** 2 + (y1 - y0) ** 2 + 1e-12) / normalizer

    losses, ious, diags, valid = [], [], [], []
    mass = stats.mass.detach()
    for i, box in enumerate(target_boxes):
        if box is None or float(mass[i]) < SOFT_MASS_EPS:
            valid.append(False)
            continue
        valid.append(True)
        clipped = box.clip(h, w)
        inside = stats.mask[i, clipped.y_min : clipped.y_max + 1,
                            clipped.x_min : clipped.x_max + 1].sum()
        soft_iou = inside / stats.mass[i]
        losses.append(1.0 - soft_iou + cfg.lam * diag[i])
        ious.append(soft_iou)
        diags.append(diag[i])
    return losses, ious, diags, valid


def ria_soft_terms(heatmap: torch.Tensor, b_od: Box, cfg: LossConfig) -> Optional[SoftRiaTerms]:
    """Soft attention loss for one normalized heatmap against a detector box.

    Measures the fraction of the sigmoid mask's mass inside b_od (the soft
    counterpart of iou_hat) and penalizes the diagonal of the soft rectangle.
    Returns None when the mask is degenerate, in which case the caller skips
    the sample's attention term.
    """
    if heatmap.ndim != 2:
        raise ConfigurationError(f"expected one 2-D heatmap, got shape {tuple(heatmap.shape)}")
    losses, ious, diags, valid = _soft_losses(heatmap.unsqueeze(0), [b_od], cfg)
    if not valid[0]:
        return None
    return SoftRiaTerms(loss=losses[0], soft_iou_hat=ious[0], soft_diag=diags[0])


def ria_soft(heatmap: torch.Tensor, b_od: Box, cfg: LossConfig) -> Optional[torch.Tensor]:
    """Scalar soft attention loss, or None when saliency is degenerate."""
    terms = ria_soft_terms(heatmap, b_od, cfg)
    return None if terms is None else terms.loss


@dataclass
class BatchRiaResult:
    """Aggregate of ria_soft over a batch: mean over the non-skipped samples."""

    loss: torch.Tensor  # scalar; zero (constant) when every sample is skipped
    mean_iou_hat: float
    mean_diag: float
    skipped: tuple[bool, ...]

    @property
    def skip_rate(self) -> float:
        if not self.skipped:
            return 0.0
        return sum(self.skipped) / len(self.skipped)


def ria_soft_batch(heatmaps: torch.Tensor, target_boxes: Sequence[Optional[Box]],
                   cfg: LossConfig) -> BatchRiaResult:
    """Apply ria_soft per sample and average over the usable ones."""
    losses, ious, diags, valid = _soft_losses(heatmaps, target_boxes, cfg)
    if losses:
        loss = torch.stack(losses).mean()
        mean_iou = float(sum(float(v) for v in ious) / len(ious))
        mean_diag = float(sum(float(v) for v in diags) / len(diags))
    else:
        loss = heatmaps.new_zeros(())
        mean_iou = 0.0
        mean_diag = 0.0
    return BatchRiaResult(loss=loss, mean_iou_hat=mean_iou, mean_diag=mean_diag,
                          skipped=tuple(not v for v in valid))


def total_loss(ce, ria, cfg: LossConfig, *, iou_hat_value: float = 0.0,
               diag_value: float = 0.0,
               skipped: Sequence[bool] = ()) -> tuple:
    """Combine the two terms: total = alpha * ce + beta * ria.

    Works on tensors during training and on plain floats for bookkeeping.
    Returns (total, LossBreakdown); the breakdown stores detached floats.
    """
    def _scalar(value) -> float:
        return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)

    total = cfg.alpha * ce + cfg.beta * ria
    breakdown = LossBreakdown(
        total=_scalar(total),
        ce=_scalar(ce),
        ria=_scalar(ria),
        iou_hat=float(iou_hat_value),
        diag_penalty=float(diag_value),
        skipped_ria=tuple(bool(s) for s in skipped),
    )
    return total, breakdown
