"""Unsupervised single-object localization over patch similarity graphs.

An image is cut into equal patches and described by a frozen feature
extractor. Patch-pair similarities (dot products) form a graph whose
least-connected patch is taken as the seed, under the observation that
foreground patches correlate with fewer patches than background ones. The
seed is expanded with the lowest-degree positively-correlated patches, a
foreground mask is grown from similarity to the seed set, and the pixel box
of the seed's 8-connected patch component is the detection.

Detection is label-free and deterministic, so boxes are computed once per
dataset and frozen in a text cache for training to consume.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .boxes import Box, connected_components
from .errors import ConfigurationError, InputError, StaleCacheError

DEFAULT_EXPANSION = 100  # patches added around the seed, capped by availability

CACHE_MAGIC = "ria-detections"
CACHE_VERSION = 1


@dataclass
class PatchFeatures:
    """One feature vector per patch, row-major over the patch grid."""

    features: np.ndarray  # (P, D)
    grid: tuple[int, int]  # (rows, cols), rows * cols == P
    patch_size: int

    def __post_init__(self):
        rows, cols = self.grid
        if self.features.ndim != 2 or self.features.shape[0] != rows * cols:
            raise InputError(
                f"features shape {self.features.shape} does not match grid {self.grid}"
            )
        if not np.isfinite(self.features).all():
            raise InputError("patch features contain non-finite values")


@dataclass
class SimilarityGraph:
    """Dense symmetric patch-pair similarities with a positive-edge adjacency."""

    sims: np.ndarray  # (P, P)
    grid: tuple[int, int]

    @property
    def adjacency(self) -> np.ndarray:
        return self.sims > 0

    def degrees(self) -> np.ndarray:
        """Number of other patches each patch is positively correlated with."""
        adj = self.adjacency.copy()
        np.fill_diagonal(adj, False)
        return adj.sum(axis=1)


class ColorStatDescriptor:
    """Hand-crafted frozen patch descriptor: color statistics plus edge energy.

    Per patch: mean and standard deviation of each channel and the mean
    absolute horizontal/vertical gray gradients. Features are centered across
    the image's patches and L2-normalized, so dot-product similarities behave
    like cosines and the (majority) background ends up weakly self-correlated.
    A trained patch-embedding model can be dropped in through the same
    interface.
    """

    name = "color-stat"

    def __init__(self, patch_size: int = 8):
        if patch_size < 2:
            raise ConfigurationError(f"patch_size must be >= 2, got {patch_size}")
        self.patch_size = patch_size

    def fingerprint(self) -> str:
        return f"{self.name},patch={self.patch_size}"

    def __call__(self, image: np.ndarray) -> np.ndarray:
        ps = self.patch_size
        h, w, c = image.shape
        rows, cols = h // ps, w // ps
        patches = (
            image[: rows * ps, : cols * ps]
            .reshape(rows, ps, cols, ps, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(rows * cols, ps * ps, c)
        )
        means = patches.mean(axis=1)
        stds = patches.std(axis=1)
        gray = image[..., :3].mean(axis=2) if c >= 3 else image[..., 0]
        gx = np.abs(np.diff(gray, axis=1, prepend=gray[:, :1]))
        gy = np.abs(np.diff(gray, axis=0, prepend=gray[:1, :]))
        def pool(g):
            return (
                g[: rows * ps, : cols * ps]
                .reshape(rows, ps, cols, ps)
                .transpose(0, 2, 1, 3)
                .reshape(rows * cols, ps * ps)
                .mean(axis=1)
            )
        feats = np.concatenate(
            [means, stds, pool(gx)[:, None], pool(gy)[:, None]], axis=1
        ).astype(np.float64)
        feats -= feats.mean(axis=0, keepdims=True)
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return feats / np.maximum(norms, 1e-12)


def patch_features(image: np.ndarray, extractor) -> PatchFeatures:
    """Pad the image to a whole patch grid and run the extractor."""
    if extractor is None:
        raise ConfigurationError("no feature extractor configured")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    ps = extractor.patch_size
    h, w = image.shape[:2]
    pad_h = (-h) % ps
    pad_w = (-w) % ps
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    rows, cols = image.shape[0] // ps, image.shape[1] // ps
    feats = np.asarray(extractor(image), dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != rows * cols:
        raise InputError(
            f"extractor returned shape {feats.shape}, expected ({rows * cols}, D)"
        )
    return PatchFeatures(features=feats, grid=(rows, cols), patch_size=ps)


def similarity_graph(pf: PatchFeatures) -> SimilarityGraph:
    """Dot-product similarities between every patch pair."""
    sims = pf.features @ pf.features.T
    sims = (sims + sims.T) / 2.0  # exact symmetry against float noise
    return SimilarityGraph(sims=sims, grid=pf.grid)


def select_seed(graph: SimilarityGraph) -> int:
    """Patch with the fewest positive correlations; ties go to the smallest index."""
    degrees = graph.degrees()
    if len(degrees) < 2:
        raise InputError("need at least 2 patches to pick a seed")
    return int(degrees.argmin())  # argmin returns the first minimum


def expand_seed(graph: SimilarityGraph, seed: int, k: int = DEFAULT_EXPANSION) -> np.ndarray:
    """Seed plus the k lowest-degree patches positively correlated with it.

    Fewer than k candidates means all of them are taken; no positive
    neighbors leaves the seed alone.
    """
    sims = graph.sims
    degrees = graph.degrees()
    candidates = [q for q in range(sims.shape[0]) if q != seed and sims[seed, q] > 0]
    candidates.sort(key=lambda q: (degrees[q], q))
    chosen = candidates[: max(k, 0)]
    return np.array(sorted([seed] + chosen), dtype=np.int64)


def object_mask(graph: SimilarityGraph, seed_set: np.ndarray) -> np.ndarray:
    """Foreground = patches whose summed similarity to the seed set is positive.

    Returned as a boolean (rows, cols) grid.
    """
    if len(seed_set) == 0:
        raise InputError("seed set is empty")
    totals = graph.sims[:, np.asarray(seed_set, dtype=np.int64)].sum(axis=1)
    return (totals > 0).reshape(graph.grid)


@dataclass
class Detection:
    """A detector box in pixel coordinates plus diagnostics.

    flagged marks the degenerate fallback (featureless or uniformly similar
    image), where the box covers the whole image.
    """

    box: Box
    flagged: bool = False
    seed_index: Optional[int] = None
    patch_mask: Optional[np.ndarray] = None


def _full_image_box(h: int, w: int) -> Box:
    return Box(0, 0, w - 1, h - 1)


def detect_box(image: np.ndarray, extractor, k: int = DEFAULT_EXPANSION) -> Detection:
    """Run the full localization pipeline on one image.

    The pixel box tightly covers the seed's 8-connected component of the
    foreground patch mask, clipped to the original image. Degenerate images
    (no usable similarity structure) fall back to a flagged full-image box.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    pf = patch_features(image, extractor)
    graph = similarity_graph(pf)

    degrees = graph.degrees()
    p = len(degrees)
    if degrees.min() >= p - 1:  # complete graph: every patch similar to every other
        return Detection(box=_full_image_box(h, w), flagged=True)

    seed = select_seed(graph)
    seed_set = expand_seed(graph, seed, k)
    mask = object_mask(graph, seed_set)
    rows, cols = graph.grid
    seed_rc = (seed // cols, seed % cols)
    if not mask[seed_rc]:
        return Detection(box=_full_image_box(h, w), flagged=True, seed_index=seed)

    for comp in connected_components(mask):
        if any(py == seed_rc[0] and px == seed_rc[1] for py, px in comp.pixels):
            ps = pf.patch_size
            box = Box(
                x_min=comp.box.x_min * ps,
                y_min=comp.box.y_min * ps,
                x_max=(comp.box.x_max + 1) * ps - 1,
                y_max=(comp.box.y_max + 1) * ps - 1,
            ).clip(h, w)
            return Detection(box=box, flagged=False, seed_index=seed, patch_mask=mask)
    # Unreachable: the seed is foreground, so some component contains it.
    raise AssertionError("seed not found in any component")


def detector_fingerprint(extractor, k: int = DEFAULT_EXPANSION) -> str:
    """Stable hash of everything that influences the produced boxes."""
    payload = f"{CACHE_MAGIC}:v{CACHE_VERSION}:{extractor.fingerprint()}:k={k}:sim=dot"
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class DetectionCache:
    """Frozen image-id -> detector box map, persisted as diff-friendly text.

    Format: one header line '# <magic> v<version> fingerprint=<hex>', then one
    tab-separated record per image: id, x_min, y_min, x_max, y_max, flag.
    """

    fingerprint: str
    entries: dict = field(default_factory=dict)  # image id -> Box
    flags: dict = field(default_factory=dict)  # image id -> bool

    def add(self, image_id: str, detection: Detection) -> None:
        if "\t" in image_id or "\n" in image_id:
            raise InputError(f"image id {image_id!r} may not contain tabs or newlines")
        self.entries[image_id] = detection.box
        self.flags[image_id] = detection.flagged

    def get(self, image_id: str) -> Optional[Box]:
        return self.entries.get(image_id)

    def save(self, path) -> None:
        lines = [f"# {CACHE_MAGIC} v{CACHE_VERSION} fingerprint={self.fingerprint}"]
        for image_id in sorted(self.entries):
            b = self.entries[image_id]
            flag = int(self.flags.get(image_id, False))
            lines.append(f"{image_id}\t{b.x_min}\t{b.y_min}\t{b.x_max}\t{b.y_max}\t{flag}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, expected_fingerprint: Optional[str] = None) -> "DetectionCache":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            parts = header.split()
            if (
                len(parts) != 4
                or parts[0] != "#"
                or parts[1] != CACHE_MAGIC
                or not parts[3].startswith("fingerprint=")
            ):
                raise StaleCacheError(f"{path} does not look like a detection cache")
            if parts[2] != f"v{CACHE_VERSION}":
                raise StaleCacheError(f"unsupported cache version {parts[2]} in {path}")
            fingerprint = parts[3].split("=", 1)[1]
            if expected_fingerprint is not None and fingerprint != expected_fingerprint:
                raise StaleCacheError(
                    f"cache {path} was built with fingerprint {fingerprint}, "
                    f"current detector is {expected_fingerprint}"
                )
            cache = cls(fingerprint=fingerprint)
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                fields = line.split("\t")
                if len(fields) != 6:
                    raise StaleCacheError(f"malformed cache record at {path}:{lineno}")
                image_id, x0, y0, x1, y1, flag = fields
                cache.entries[image_id] = Box(int(x0), int(y0), int(x1), int(y1))
                cache.flags[image_id] = bool(int(flag))
        return cache


def precompute_cache(samples: Iterable, extractor, path=None,
                     k: int = DEFAULT_EXPANSION) -> DetectionCache:
    """Detect every sample once and (optionally) persist the boxes.

    samples yield objects with .image and .image_id. The cache fingerprint
    binds the boxes to the extractor configuration so stale files are refused
    at load time.
    """
    cache = DetectionCache(fingerprint=detector_fingerprint(extractor, k))
    for sample in samples:
        cache.add(sample.image_id, detect_box(sample.image, extractor, k))
    if path is not None:
        cache.save(path)
    return cache


def load_cache(path, extractor=None, k: int = DEFAULT_EXPANSION) -> DetectionCache:
    """Load a cache, verifying the fingerprint when an extractor is given."""
    expected = detector_fingerprint(extractor, k) if extractor is not None else None
    return DetectionCache.load(path, expected)
