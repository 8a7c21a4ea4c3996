"""Command-line front end.

Subcommands cover the whole workflow: gen-data (synthetic shapes dataset),
detect (precompute detector boxes), train (two-stage training), explain
(heatmaps, overlays, and box records for a checkpoint), eval-noise
(region-noise robustness curves), and report (side-by-side comparison of two
checkpoints). Every run writes only under its --out directory and finishes by
writing a manifest.json listing each artifact.

Exit codes: 0 success, 2 usage, 3 configuration error, 4 data/input error,
5 stale detection cache.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .boxes import binarize, connected_components, heatmap_box, soft_box, soft_box_to_rect
from .data import (DEFAULT_BACKGROUND_BIAS, Dataset, generate_synthetic_dataset,
                   load_image_folder, save_dataset_folder)
from .errors import ConfigurationError, DataError, InputError, StaleCacheError
from .evaluation import mean_gradcam_box_iou
from .gradcam import gradcam
from .losses import LossConfig
from .lost import ColorStatDescriptor, DetectionCache, precompute_cache
from .models import CHECKPOINT_FORMAT, load_model, read_checkpoint_meta
from .noise import (DEFAULT_SIGMAS, MASK_DETECTOR_BOX, MASK_GROUND_TRUTH, noise_report,
                    plot_noise_curves, write_comparison, write_report_csv, write_rfs_csv)
from .npz import write_npz
from .render import draw_box, heatmap_overlay, save_png, side_by_side, stack_rows
from .training import (TRAIN_CHECKPOINT_FORMAT, TrainConfig, config_hash, config_to_dict,
                       load_checkpoint, load_train_config, train)

logger = logging.getLogger(__name__)

HEATMAP_FORMAT = "ria-heatmap"
HEATMAP_VERSION = 1

GT_BOX_COLOR = (60, 220, 60)
GC_BOX_COLOR = (255, 255, 255)


def _hash_opts(opts: dict) -> str:
    return hashlib.sha256(json.dumps(opts, sort_keys=True).encode()).hexdigest()[:12]


def _header(subcommand: str, seed, cfg_hash: str) -> None:
    print(
        f"# ria {subcommand} | seed={seed} config={cfg_hash} "
        f"python={platform.python_version()} numpy={np.__version__} torch={torch.__version__}"
    )


def _sigma_list(text: str):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_any_model(path):
    """Accept either a plain model file or a training checkpoint."""
    meta = read_checkpoint_meta(path)
    fmt = meta.get("format")
    if fmt == CHECKPOINT_FORMAT:
        return load_model(path)
    if fmt == TRAIN_CHECKPOINT_FORMAT:
        model, _, _, _ = load_checkpoint(path)
        return model
    raise ConfigurationError(f"unrecognized checkpoint format {fmt!r} in {path}")


def _load_rgb(path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DataError(f"image file {path} does not exist")
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}")


def _subset(dataset: Dataset, limit) -> Dataset:
    if not limit or limit >= len(dataset):
        return dataset
    return dataclasses.replace(
        dataset,
        samples=dataset.samples[:limit],
        ident=f"{dataset.ident}[:{limit}]",
    )


# --- subcommand handlers ------------------------------------------------------
# Each returns (out_dir, config_hash, artifact_paths); main() writes the
# manifest from that.

def _cmd_gen_data(args):
    out = Path(args.out)
    opts = {"gen-data": {"classes": args.classes, "per_class": args.per_class,
                         "size": args.size, "seed": args.seed,
                         "background": args.background,
                         "background_bias": args.background_bias}}
    cfg_hash = _hash_opts(opts)
    _header("gen-data", args.seed, cfg_hash)
    ds = generate_synthetic_dataset(
        num_classes=args.classes, per_class=args.per_class, image_size=args.size,
        seed=args.seed, background=args.background,
        background_bias=args.background_bias,
    )
    save_dataset_folder(ds, out)
    artifacts = sorted(p for p in out.rglob("*") if p.is_file())
    print(f"wrote {len(ds)} images ({args.classes} classes) to {out}")
    return out, cfg_hash, artifacts


def _cmd_detect(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = {"detect": {"data": str(args.data), "patch_size": args.patch_size,
                       "expansion": args.expansion, "limit": args.limit}}
    cfg_hash = _hash_opts(opts)
    _header("detect", "-", cfg_hash)
    ds = load_image_folder(args.data)
    samples = ds.samples[: args.limit] if args.limit else ds.samples
    extractor = ColorStatDescriptor(args.patch_size)
    cache_path = out / "detections.txt"
    cache = precompute_cache(samples, extractor, cache_path, args.expansion)
    flagged = sum(cache.flags.values())
    print(f"detected {len(cache.entries)} boxes ({flagged} flagged) -> {cache_path}")
    return out, cfg_hash, [cache_path]


def _apply_train_overrides(cfg: TrainConfig, args) -> TrainConfig:
    loss_fields = {}
    for name in ("alpha", "beta", "lam", "threshold", "tau"):
        value = getattr(args, name)
        if value is not None:
            loss_fields[name] = value
    if loss_fields:
        cfg = dataclasses.replace(cfg, loss=dataclasses.replace(cfg.loss, **loss_fields))

    model_fields = {}
    if args.template is not None:
        model_fields["template"] = args.template
    if args.num_classes is not None:
        model_fields["num_classes"] = args.num_classes
    if args.input_size is not None:
        model_fields["input_size"] = args.input_size
    if args.seed is not None:
        model_fields["seed"] = args.seed
    if model_fields:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **model_fields))

    if args.optimizer is not None or args.lr is not None:
        spec = cfg.resolved_optimizer()
        if args.optimizer is not None:
            spec = dataclasses.replace(spec, name=args.optimizer)
        if args.lr is not None:
            spec = dataclasses.replace(spec, lr=args.lr)
        cfg = dataclasses.replace(cfg, optimizer=spec)

    top = {}
    if args.data is not None:
        top["dataset"] = {"kind": "folder", "path": str(args.data)}
    if args.epochs is not None:
        top["total_epochs"] = args.epochs
    if args.warmup is not None:
        top["warmup_epochs"] = args.warmup
    if args.batch_size is not None:
        top["batch_size"] = args.batch_size
    if args.seed is not None:
        top["seed"] = args.seed
    if args.val_fraction is not None:
        top["val_fraction"] = args.val_fraction
    if args.cache is not None:
        top["cache_path"] = str(args.cache)
    if top:
        cfg = dataclasses.replace(cfg, **top)
    return cfg


def _cmd_train(args):
    out = Path(args.out)
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    cfg = _apply_train_overrides(cfg, args)
    ria_active = cfg.loss.beta > 0 and cfg.warmup_epochs < cfg.total_epochs
    if cfg.cache_path is None and ria_active:
        cfg = dataclasses.replace(cfg, cache_path=str(out / "detections.txt"))
    cfg_hash = config_hash(cfg)
    _header("train", cfg.seed, cfg_hash)
    out.mkdir(parents=True, exist_ok=True)
    config_path = out / "config.json"
    config_path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")

    result = train(cfg, out_dir=out, resume=args.resume)

    artifacts = [config_path, out / "steps.csv", out / "epochs.csv"]
    artifacts += result.checkpoints
    if cfg.cache_path and Path(cfg.cache_path).exists():
        cache_file = Path(cfg.cache_path)
        if out in cache_file.parents or cache_file.parent == out:
            artifacts.append(cache_file)
    if result.epoch_rows:
        last = result.epoch_rows[-1]
        print(f"finished epoch {last['epoch']}: train_acc={last['train_acc']} "
              f"val_acc={last['val_acc']}")
    return out, cfg_hash, artifacts


def _cmd_explain(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_any_model(args.checkpoint)
    loss_defaults = LossConfig()

    if args.image:
        items = [(Path(p).stem, _load_rgb(p, model.config.input_size), None)
                 for p in args.image]
    elif args.data:
        ds = load_image_folder(args.data)
        items = [(s.image_id, s.image, s.box) for s in ds.samples[: args.limit]]
    else:
        raise ConfigurationError("explain needs --image or --data")

    opts = {"explain": {"checkpoint": str(args.checkpoint), "threshold": args.threshold,
                        "images": [ident for ident, _, _ in items]}}
    cfg_hash = _hash_opts(opts)
    _header("explain", model.config.seed, cfg_hash)

    artifacts = []
    records = []
    for ident, image, gt_box in items:
        hm = gradcam(model, image)
        hard = heatmap_box(hm, args.threshold)
        comps = connected_components(binarize(hm, args.threshold))
        soft = soft_box(torch.from_numpy(hm.values), loss_defaults.tau, args.threshold,
                        loss_defaults.kappa)

        overlay = heatmap_overlay(image, hm.values)
        if gt_box is not None:
            overlay = draw_box(overlay, gt_box, color=GT_BOX_COLOR)
        if hard is not None:
            overlay = draw_box(overlay, hard, color=GC_BOX_COLOR)
        stem = ident.replace("/", "__")
        overlay_path = out / f"{stem}.overlay.png"
        save_png(overlay, overlay_path)

        meta = {
            "format": HEATMAP_FORMAT,
            "version": HEATMAP_VERSION,
            "shape": list(hm.values.shape),
            "dtype": "float32",
            "class_index": hm.class_index,
            "source_size": list(hm.source_size),
            "image": ident,
        }
        heatmap_path = out / f"{stem}.heatmap.npz"
        write_npz(heatmap_path, __meta__=np.array(json.dumps(meta)),
                  heatmap=hm.values.astype(np.float32))

        records.append({
            "id": ident,
            "class_index": hm.class_index,
            "box": [hard.x_min, hard.y_min, hard.x_max, hard.y_max] if hard else None,
            "soft_rect": ([round(float(v), 3) for v in soft_box_to_rect(soft)]
                          if soft else None),
            "components": len(comps),
        })
        artifacts += [overlay_path, heatmap_path]

    boxes_path = out / "boxes.jsonl"
    with open(boxes_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    artifacts.append(boxes_path)
    print(f"explained {len(records)} image(s) -> {out}")
    return out, cfg_hash, artifacts


def _detector_boxes(args):
    if args.mask_source != MASK_DETECTOR_BOX:
        return None
    if not args.cache:
        raise ConfigurationError("--mask-source detector-box requires --cache")
    return DetectionCache.load(args.cache).entries


def _cmd_eval_noise(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_any_model(args.checkpoint)
    ds = _subset(load_image_folder(args.data), args.limit)
    boxes = _detector_boxes(args)
    model_id = args.model_id or Path(args.checkpoint).stem
    opts = {"eval-noise": {"checkpoint": str(args.checkpoint), "data": str(args.data),
                           "sigmas": list(args.sigmas), "mask_source": args.mask_source,
                           "seed": args.seed, "limit": args.limit}}
    cfg_hash = _hash_opts(opts)
    _header("eval-noise", args.seed, cfg_hash)

    report = noise_report(model, ds, sigma_levels=args.sigmas,
                          mask_source=args.mask_source, seed=args.seed,
                          model_id=model_id, boxes=boxes)
    report_path = out / "noise_report.csv"
    rfs_path = out / "rfs_summary.csv"
    curves_path = out / "noise_curves.png"
    write_report_csv(report, report_path)
    write_rfs_csv(report, rfs_path)
    plot_noise_curves(report, curves_path)
    print(f"clean accuracy {report.clean_accuracy:.4f}, aggregate rfs {report.rfs:+.4f}")
    return out, cfg_hash, [report_path, rfs_path, curves_path]


def _first_per_class(samples, n: int):
    by_label = {}
    for s in samples:
        by_label.setdefault(s.label, s)
    picks = [by_label[k] for k in sorted(by_label)][:n]
    if len(picks) < n:
        chosen = {id(p) for p in picks}
        picks += [s for s in samples if id(s) not in chosen][: n - len(picks)]
    return picks


def _overlay_panel(model, sample, threshold):
    hm = gradcam(model, sample.image)
    panel = heatmap_overlay(sample.image, hm.values)
    hard = heatmap_box(hm, threshold)
    if hard is not None:
        panel = draw_box(panel, hard, color=GC_BOX_COLOR)
    return panel


def _cmd_report(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    models = [("baseline", _load_any_model(args.baseline)),
              ("ria", _load_any_model(args.ria))]
    ds = _subset(load_image_folder(args.data), args.limit)
    boxes = _detector_boxes(args)
    opts = {"report": {"baseline": str(args.baseline), "ria": str(args.ria),
                       "data": str(args.data), "sigmas": list(args.sigmas),
                       "seed": args.seed, "num_images": args.num_images,
                       "limit": args.limit}}
    cfg_hash = _hash_opts(opts)
    _header("report", args.seed, cfg_hash)
    artifacts = []

    rows = []
    for sample in _first_per_class(ds.samples, args.num_images):
        base = (np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
        if sample.box is not None:
            base = draw_box(base, sample.box, color=GT_BOX_COLOR)
        panels = [base] + [_overlay_panel(m, sample, args.threshold) for _, m in models]
        rows.append(side_by_side(panels))
    panels_path = out / "gradcam_panels.png"
    save_png(stack_rows(rows), panels_path)
    artifacts.append(panels_path)

    reports = [noise_report(m, ds, sigma_levels=args.sigmas, mask_source=args.mask_source,
                            seed=args.seed, model_id=name, boxes=boxes)
               for name, m in models]
    artifacts += write_comparison(reports, out)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        fh.write("model,clean_accuracy,mean_gradcam_iou,rfs\n")
        for (name, m), rep in zip(models, reports):
            mean_iou = mean_gradcam_box_iou(m, ds.samples, args.threshold)
            fh.write(f"{name},{rep.clean_accuracy:.6f},{mean_iou:.6f},{rep.rfs:.6f}\n")
            print(f"{name}: clean_acc={rep.clean_accuracy:.4f} "
                  f"mean_iou={mean_iou:.4f} rfs={rep.rfs:+.4f}")
    artifacts.append(metrics_path)
    return out, cfg_hash, artifacts


# --- parser and dispatch ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ria",
        description="Attention-guided training toolkit: detector-box supervision "
                    "for classifier saliency plus noise-robustness evaluation.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--background", choices=["blotch", "plain"], default="blotch")
    p.add_argument("--background-bias", type=float, default=DEFAULT_BACKGROUND_BIAS,
                   help="strength of the class-correlated background tint")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("detect", help="precompute detector boxes into a cache file")
    p.add_argument("--data", required=True, help="image folder (class subdirectories)")
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--expansion", type=int, default=100)
    p.add_argument("--limit", type=int, default=None, help="only the first N images")
    p.set_defaults(func=_cmd_detect)

    p = sub.add_parser("train", help="train a classifier (config file + flag overrides)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON training config")
    p.add_argument("--data", default=None, help="image folder; default is synthetic data")
    p.add_argument("--template", default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--cache", default=None, help="detection cache path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("explain", help="heatmap overlays and box records for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--image", action="append", default=None, help="repeatable image path")
    p.add_argument("--data", default=None, help="image folder to explain instead")
    p.add_argument("--limit", type=int, default=8, help="images taken from --data")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("eval-noise", help="foreground/background noise robustness")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigmas", type=_sigma_list, default=DEFAULT_SIGMAS)
    p.add_argument("--mask-source", choices=[MASK_GROUND_TRUTH, MASK_DETECTOR_BOX],
                   default=MASK_GROUND_TRUTH)
    p.add_argument("--cache", default=None, help="detection cache for detector-box masks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-id", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=_cmd_eval_noise)

    p = sub.add_parser("report", help="side-by-side comparison of two checkpoints")
    p.add_argument("--baseline", required=True)
    p.add_argument("--ria", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num-images", type=int, default=8)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sigmas", type=_sigma_list, default=DEFAULT_SIGMAS)
    p.add_argument("--mask-source", choices=[MASK_GROUND_TRUTH, MASK_DETECTOR_BOX],
                   default=MASK_GROUND_TRUTH)
    p.add_argument("--cache", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        out, cfg_hash, artifacts = args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3
    except (DataError, InputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 4
    except StaleCacheError as exc:
        print(f"stale cache: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4

    manifest_path = out / "manifest.json"
    manifest = {
        "subcommand": args.subcommand,
        "config_hash": cfg_hash,
        "artifacts": sorted(
            p.relative_to(out).as_posix() for p in artifacts if p != manifest_path
        ),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(manifest['artifacts'])} artifact(s); manifest: {manifest_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
