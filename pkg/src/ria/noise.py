"""Foreground/background noise-sensitivity evaluation.

Gaussian noise is injected into exactly one region (foreground or background,
delimited by a mask), accuracy is measured per noise level, and the relative
foreground sensitivity rfs = a_bg - a_fg summarizes how much more the model
depends on the foreground. Noise lives in normalized [0, 1] pixel space and
every (region, level) pass is seeded, so curves are reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boxes import Box
from .data import Sample
from .errors import ConfigurationError, InputError
from .evaluation import predict

REGIONS = ("foreground", "background")
DEFAULT_SIGMAS = (0.0, 0.05, 0.1, 0.2, 0.4)

MASK_GROUND_TRUTH = "ground-truth"
MASK_DETECTOR_BOX = "detector-box"


@dataclass
class NoiseSpec:
    region: str
    sigma_levels: tuple = DEFAULT_SIGMAS
    mask_source: str = MASK_GROUND_TRUTH
    seed: int = 0

    def __post_init__(self):
        if self.region not in REGIONS:
            raise ConfigurationError(f"region must be one of {REGIONS}, got {self.region!r}")
        if self.mask_source not in (MASK_GROUND_TRUTH, MASK_DETECTOR_BOX):
            raise ConfigurationError(f"unknown mask source {self.mask_source!r}")
        levels = tuple(sorted(float(s) for s in self.sigma_levels))
        if not levels or levels[0] < 0:
            raise ConfigurationError("sigma levels must be non-negative")
        if 0.0 not in levels:
            levels = (0.0,) + levels
        object.__setattr__(self, "sigma_levels", levels)


@dataclass
class NoiseReport:
    """Accuracy-vs-noise curves for both regions plus the rfs summary."""

    model_id: str
    dataset_id: str
    sigma_levels: tuple
    foreground_accuracy: tuple
    background_accuracy: tuple
    mask_source: str = MASK_GROUND_TRUTH
    seed: int = 0

    @property
    def rfs_per_sigma(self) -> tuple:
        return tuple(
            rfs(b, f) for b, f in zip(self.background_accuracy, self.foreground_accuracy)
        )

    @property
    def rfs(self) -> float:
        """Mean rfs over the nonzero noise levels (toolkit convention)."""
        vals = [r for s, r in zip(self.sigma_levels, self.rfs_per_sigma) if s > 0]
        if not vals:
            return 0.0
        return float(sum(vals) / len(vals))

    @property
    def clean_accuracy(self) -> float:
        return self.foreground_accuracy[self.sigma_levels.index(0.0)]


def rfs(a_bg: float, a_fg: float) -> float:
    """Relative foreground sensitivity: accuracy under background noise minus
    accuracy under foreground noise."""
    return a_bg - a_fg


def add_region_noise(image: np.ndarray, mask: np.ndarray, sigma: float,
                     region: str, rng) -> np.ndarray:
    """Add clipped Gaussian noise to one region only.

    mask is True on the foreground. Pixels of the other region are returned
    bit-identical to the input; sigma 0 is the identity. rng is a
    numpy Generator or a seed.
    """
    if region not in REGIONS:
        raise ConfigurationError(f"region must be one of {REGIONS}, got {region!r}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise InputError(f"mask shape {mask.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    if sigma == 0:
        return out
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    where = mask if region == "foreground" else ~mask
    noisy = image[where] + rng.normal(0.0, sigma, size=image[where].shape)
    out[where] = np.clip(noisy, 0.0, 1.0).astype(image.dtype)
    return out


def _sample_mask(sample: Sample, mask_source: str, boxes: Optional[dict]) -> np.ndarray:
    h, w = sample.image.shape[:2]
    if mask_source == MASK_GROUND_TRUTH:
        if sample.mask is None:
            raise ConfigurationError(
                f"sample {sample.image_id} has no ground-truth mask; "
                f"use mask_source={MASK_DETECTOR_BOX!r}"
            )
        return sample.mask
    if boxes is None or sample.image_id not in boxes:
        raise ConfigurationError(f"no detector box for sample {sample.image_id}")
    box: Box = boxes[sample.image_id]
    return box.to_mask(h, w)


def accuracy_under_noise(model, samples, spec: NoiseSpec,
                         boxes: Optional[dict] = None,
                         batch_size: int = 256) -> dict:
    """Accuracy per noise level for one region.

    Every sample is corrupted once per level with a deterministic stream
    derived from (seed, region, level index). boxes supplies detector boxes
    when spec.mask_source is 'detector-box'.
    """
    labels = np.array([s.label for s in samples])
    masks = [_sample_mask(s, spec.mask_source, boxes) for s in samples]
    region_code = REGIONS.index(spec.region)
    curve = {}
    for si, sigma in enumerate(spec.sigma_levels):
        rng = np.random.default_rng([spec.seed, region_code, si])
        corrupted = [
            Sample(
                image=add_region_noise(s.image, m, sigma, spec.region, rng),
                label=s.label,
                image_id=s.image_id,
            )
            for s, m in zip(samples, masks)
        ]
        preds = predict(model, corrupted, batch_size)
        curve[sigma] = float((preds == labels).mean())
    return curve


def noise_report(model, dataset, sigma_levels=DEFAULT_SIGMAS,
                 mask_source: str = MASK_GROUND_TRUTH, seed: int = 0,
                 model_id: str = "model", boxes: Optional[dict] = None,
                 batch_size: int = 256) -> NoiseReport:
    """Run both regions over the same noise grid and assemble the report."""
    curves = {}
    levels = None
    for region in REGIONS:
        spec = NoiseSpec(region=region, sigma_levels=sigma_levels,
                         mask_source=mask_source, seed=seed)
        curves[region] = accuracy_under_noise(model, dataset.samples, spec, boxes, batch_size)
        levels = spec.sigma_levels
    return NoiseReport(
        model_id=model_id,
        dataset_id=dataset.ident,
        sigma_levels=levels,
        foreground_accuracy=tuple(curves["foreground"][s] for s in levels),
        background_accuracy=tuple(curves["background"][s] for s in levels),
        mask_source=mask_source,
        seed=seed,
    )


def compare_models(reports: Sequence[NoiseReport]) -> list[dict]:
    """Tabulate reports against the first one (the reference row).

    All reports must share the dataset and sigma grid. Each row carries the
    per-region curves, the aggregate rfs, and delta_rfs against row 0.
    """
    if not reports:
        raise InputError("need at least one report")
    first = reports[0]
    for rep in reports[1:]:
        if rep.sigma_levels != first.sigma_levels:
            raise InputError("reports use different sigma grids")
        if rep.dataset_id != first.dataset_id:
            raise InputError("reports evaluate different datasets")
    rows = []
    for i, rep in enumerate(reports):
        row = {
            "model": rep.model_id,
            "clean_accuracy": rep.clean_accuracy,
            "rfs": rep.rfs,
        }
        if i > 0:
            row["delta_rfs"] = rep.rfs - first.rfs
        for s, a in zip(rep.sigma_levels, rep.foreground_accuracy):
            row[f"fg_acc@{s:g}"] = a
        for s, a in zip(rep.sigma_levels, rep.background_accuracy):
            row[f"bg_acc@{s:g}"] = a
        rows.append(row)
    return rows


def write_report_csv(report: NoiseReport, path) -> None:
    """Long-form CSV: model, region, sigma, accuracy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "region", "sigma", "accuracy"])
        for region, curve in (
            ("foreground", report.foreground_accuracy),
            ("background", report.background_accuracy),
        ):
            for sigma, acc in zip(report.sigma_levels, curve):
                writer.writerow([report.model_id, region, f"{sigma:g}", f"{acc:.6f}"])


def write_rfs_csv(report: NoiseReport, path) -> None:
    """Per-sigma rfs values plus the aggregate over the noisy levels."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "sigma", "rfs"])
        for sigma, value in zip(report.sigma_levels, report.rfs_per_sigma):
            writer.writerow([report.model_id, f"{sigma:g}", f"{value:.6f}"])
        writer.writerow([report.model_id, "aggregate", f"{report.rfs:.6f}"])


def plot_noise_curves(report: NoiseReport, path) -> None:
    """One model's foreground and background accuracy curves over sigma."""
    from matplotlib.figure import Figure

    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot(111)
    ax.plot(report.sigma_levels, report.foreground_accuracy, marker="o",
            label="foreground noise")
    ax.plot(report.sigma_levels, report.background_accuracy, marker="s",
            label="background noise")
    ax.set_xlabel("noise sigma")
    ax.set_ylabel("accuracy")
    ax.set_title(report.model_id)
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def write_comparison(reports: Sequence[NoiseReport], out_dir) -> list[Path]:
    """Emit the comparison CSV, per-region accuracy plots, and the rfs bars.

    Returns the created file paths.
    """
    from matplotlib.backends.backend_agg import FigureCanvasAgg  # noqa: F401
    from matplotlib.figure import Figure

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = compare_models(reports)
    created = []

    table_path = out / "noise_comparison.csv"
    keys = list(rows[-1].keys())
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, restval="")
        writer.writeheader()
        writer.writerows(rows)
    created.append(table_path)

    for region in REGIONS:
        fig = Figure(figsize=(5, 3.5))
        ax = fig.add_subplot(111)
        for rep in reports:
            curve = (rep.foreground_accuracy if region == "foreground"
                     else rep.background_accuracy)
            ax.plot(rep.sigma_levels, curve, marker="o", label=rep.model_id)
        ax.set_xlabel("noise sigma")
        ax.set_ylabel("accuracy")
        ax.set_title(f"{region} noise")
        ax.set_ylim(0, 1.02)
        ax.legend()
        fig.tight_layout()
        path = out / f"accuracy_{region}.png"
        fig.savefig(path, dpi=120)
        created.append(path)

    fig = Figure(figsize=(4, 3.5))
    ax = fig.add_subplot(111)
    names = [rep.model_id for rep in reports]
    ax.bar(names, [rep.rfs for rep in reports], color="tab:blue")
    ax.set_ylabel("rfs (bg acc - fg acc)")
    ax.set_title("relative foreground sensitivity")
    fig.tight_layout()
    path = out / "rfs.png"
    fig.savefig(path, dpi=120)
    created.append(path)
    return created
