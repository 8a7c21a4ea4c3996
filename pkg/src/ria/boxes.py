"""Heatmap-to-box conversion.

The hard path (threshold, connected components, highest-score component)
produces the box used for evaluation and visualization. Because that path
has zero gradient almost everywhere, a soft surrogate (sigmoid mask plus
mass-weighted coordinate statistics) provides the differentiable counterpart
used at training time.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ConfigurationError

# Below this much total soft-mask weight a heatmap is treated as empty and
# the caller is expected to skip its attention term.
SOFT_MASS_EPS = 1e-6

EIGHT_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in pixel coordinates, bounds inclusive.

    A 1x1-pixel box has x_min == x_max and area 1.
    """

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box coordinates: {self}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"empty box: {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def clip(self, height: int, width: int) -> "Box":
        """Clip to an image of the given size."""
        return Box(
            min(max(self.x_min, 0), width - 1),
            min(max(self.y_min, 0), height - 1),
            min(max(self.x_max, 0), width - 1),
            min(max(self.y_max, 0), height - 1),
        )

    def contains(self, other: "Box") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def to_mask(self, height: int, width: int) -> np.ndarray:
        """Rasterize to a boolean (height, width) mask."""
        m = np.zeros((height, width), dtype=bool)
        c = self.clip(height, width)
        m[c.y_min : c.y_max + 1, c.x_min : c.x_max + 1] = True
        return m


@dataclass
class BinaryMask:
    """Thresholded heatmap: True exactly where the heatmap exceeds the threshold."""

    values: np.ndarray
    threshold_used: float


@dataclass
class Component:
    """One 8-connected region of a binary mask."""

    pixels: np.ndarray  # (n, 2) array of (row, col)
    box: Box

    @property
    def size(self) -> int:
        return len(self.pixels)


def _heatmap_values(heatmap) -> np.ndarray:
    """Accept a Heatmap, numpy array, or torch tensor and return a 2-D float array."""
    values = getattr(heatmap, "values", heatmap)
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D heatmap, got shape {values.shape}")
    return values


def binarize(heatmap, threshold: float) -> BinaryMask:
    """Threshold a normalized heatmap with a strict inequality (value > threshold)."""
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
    values = _heatmap_values(heatmap)
    return BinaryMask(values=values > threshold, threshold_used=float(threshold))


def connected_components(mask) -> list[Component]:
    """Label maximal 8-connected regions of True pixels.

    Components are returned in row-major order of their first-discovered pixel,
    each with the tight bounding box over its pixels. Accepts a BinaryMask or a
    boolean array.
    """
    values = mask.values if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
    h, w = values.shape
    seen = np.zeros((h, w), dtype=bool)
    components = []
    for sy in range(h):
        for sx in range(w):
            if not values[sy, sx] or seen[sy, sx]:
                continue
            queue = deque([(sy, sx)])
            seen[sy, sx] = True
            pixels = []
            while queue:
                y, x = queue.popleft()
                pixels.append((y, x))
                for dy, dx in EIGHT_NEIGHBORS:
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and values[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            pix = np.array(pixels, dtype=np.int64)
            box = Box(
                x_min=int(pix[:, 1].min()),
                y_min=int(pix[:, 0].min()),
                x_max=int(pix[:, 1].max()),
                y_max=int(pix[:, 0].max()),
            )
            components.append(Component(pixels=pix, box=box))
    return components


def component_score(heatmap, component: Component) -> float:
    """Sum of heatmap values over a component's pixels."""
    values = _heatmap_values(heatmap)
    return float(values[component.pixels[:, 0], component.pixels[:, 1]].sum())


def select_box(heatmap, components: Sequence[Component]) -> Optional[Box]:
    """Pick the box of the component with the largest summed heatmap value.

    Ties fall back to larger pixel count, then to smaller (y_min, x_min), so the
    result is fully deterministic. Returns None when there are no components.
    """
    if not components:
        return None
    best = min(
        components,
        key=lambda c: (-component_score(heatmap, c), -c.size, c.box.y_min, c.box.x_min),
    )
    return best.box


def heatmap_box(heatmap, threshold: float = 0.5) -> Optional[Box]:
    """Threshold, label, and select in one call: the hard heatmap-to-box path."""
    mask = binarize(heatmap, threshold)
    return select_box(heatmap, connected_components(mask))


@dataclass
class SoftBox:
    """Differentiable box statistics of a soft saliency mask.

    center and extent are mass-weighted mean and standard deviation of pixel
    coordinates under the sigmoid mask; all fields except kappa and image_size
    are scalar tensors that carry gradients back to the heatmap.
    """

    center: tuple[torch.Tensor, torch.Tensor]  # (mu_x, mu_y)
    extent: tuple[torch.Tensor, torch.Tensor]  # (sigma_x, sigma_y)
    mass: torch.Tensor
    kappa: float
    image_size: tuple[int, int]  # (height, width)


def soft_mask(heatmap: torch.Tensor, tau: float, threshold: float) -> torch.Tensor:
    """Sigmoid relaxation of the thresholding step; tau -> 0 recovers the hard mask."""
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    return torch.sigmoid((heatmap - threshold) / tau)


@dataclass
class SoftStats:
    """Batched soft-mask statistics; every field except mask has shape (N,).

    Denominators are clamped to SOFT_MASS_EPS, so entries whose true mass is
    below the threshold are numerically safe but meaningless; consult mass to
    decide which samples to use.
    """

    mask: torch.Tensor
    mass: torch.Tensor
    mu_x: torch.Tensor
    mu_y: torch.Tensor
    sigma_x: torch.Tensor
    sigma_y: torch.Tensor


def soft_box_stats(heatmaps: torch.Tensor, tau: float, threshold: float) -> SoftStats:
    """Mass-weighted coordinate mean and spread of the soft mask, per sample.

    heatmaps must be (N, H, W). This is the shared numerical core behind
    soft_box and the batched training loss.
    """
    if heatmaps.ndim != 3:
        raise ValueError(f"expected (N, H, W) heatmaps, got shape {tuple(heatmaps.shape)}")
    n, h, w = heatmaps.shape
    mask = soft_mask(heatmaps, tau, threshold)
    mass = mask.sum(dim=(1, 2))
    safe = mass.clamp(min=SOFT_MASS_EPS)
    xs = torch.arange(w, dtype=heatmaps.dtype, device=heatmaps.device)
    ys = torch.arange(h, dtype=heatmaps.dtype, device=heatmaps.device)
    col_mass = mask.sum(dim=1)  # (N, W)
    row_mass = mask.sum(dim=2)  # (N, H)
    mu_x = (col_mass * xs).sum(dim=1) / safe
    mu_y = (row_mass * ys).sum(dim=1) / safe
    var_x = (col_mass * (xs - mu_x[:, None]) ** 2).sum(dim=1) / safe
    var_y = (row_mass * (ys - mu_y[:, None]) ** 2).sum(dim=1) / safe
    sigma_x = torch.sqrt(torch.clamp(var_x, min=0.0))
    sigma_y = torch.sqrt(torch.clamp(var_y, min=0.0))
    return SoftStats(mask=mask, mass=mass, mu_x=mu_x, mu_y=mu_y,
                     sigma_x=sigma_x, sigma_y=sigma_y)


def soft_box(heatmap, tau: float = 0.05, threshold: float = 0.5,
             kappa: float = math.sqrt(3.0)) -> Optional[SoftBox]:
    """Differentiable counterpart of the threshold/components/select pipeline.

    Returns None when the soft mask carries almost no mass (flat or empty
    saliency), which callers treat as a skip signal rather than an error.
    """
    if kappa <= 0:
        raise ConfigurationError(f"kappa must be positive, got {kappa}")
    if not isinstance(heatmap, torch.Tensor):
        heatmap = torch.as_tensor(_heatmap_values(heatmap))
    if heatmap.ndim != 2:
        raise ValueError(f"expected a 2-D heatmap, got shape {tuple(heatmap.shape)}")
    h, w = heatmap.shape
    stats = soft_box_stats(heatmap.unsqueeze(0), tau, threshold)
    if float(stats.mass[0]) < SOFT_MASS_EPS:
        return None
    return SoftBox(
        center=(stats.mu_x[0], stats.mu_y[0]),
        extent=(stats.sigma_x[0], stats.sigma_y[0]),
        mass=stats.mass[0],
        kappa=float(kappa),
        image_size=(int(h), int(w)),
    )


def soft_box_to_rect(sb: SoftBox) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Real-valued rectangle center +/- kappa * extent, clipped to the image.

    With kappa = sqrt(3) the rectangle recovers a uniform block of saliency to
    within a pixel, since a uniform distribution has half-width sqrt(3) times
    its standard deviation.
    """
    h, w = sb.image_size
    mu_x, mu_y = sb.center
    sigma_x, sigma_y = sb.extent
    x0 = torch.clamp(mu_x - sb.kappa * sigma_x, 0.0, w - 1.0)
    x1 = torch.clamp(mu_x + sb.kappa * sigma_x, 0.0, w - 1.0)
    y0 = torch.clamp(mu_y - sb.kappa * sigma_y, 0.0, h - 1.0)
    y1 = torch.clamp(mu_y + sb.kappa * sigma_y, 0.0, h - 1.0)
    return x0, y0, x1, y1
