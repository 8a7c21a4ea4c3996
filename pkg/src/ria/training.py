"""Two-stage training: cross-entropy warmup, then the attention term joins.

The loop is deterministic given the config seed: model init, batch order,
and the synthetic dataset all derive from it, and none of the templates use
stochastic layers. With beta = 0 the attention branch is skipped entirely, so
such a run is bit-identical to plain cross-entropy training.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset, generate_synthetic_dataset, load_image_folder, stratified_split, to_batch
from .errors import ConfigurationError
from .evaluation import accuracy
from .gradcam import heatmaps_from_capture
from .losses import LossConfig, ria_soft_batch, total_loss
from .lost import (ColorStatDescriptor, DetectionCache, detector_fingerprint,
                   load_cache, precompute_cache)
from .models import ModelConfig, build_model, forward_with_capture
from .npz import write_npz

logger = logging.getLogger(__name__)

TRAIN_CHECKPOINT_FORMAT = "ria-train-checkpoint"
TRAIN_CHECKPOINT_VERSION = 1

STEP_FIELDS = ["step", "epoch", "total", "ce", "ria", "iou_hat", "diag", "skip_rate"]
EPOCH_FIELDS = ["epoch", "train_acc", "val_acc", "total", "ce", "ria",
                "iou_hat", "diag", "skip_rate", "checkpoint"]


@dataclass
class OptimizerSpec:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9  # sgd only

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer must be 'adam' or 'sgd', got {self.name!r}")
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")


def default_optimizer(template: str) -> OptimizerSpec:
    """Momentum SGD at 0.01 for the VGG-style template, Adam at 0.001 otherwise."""
    if "vgg" in template:
        return OptimizerSpec(name="sgd", lr=0.01)
    return OptimizerSpec(name="adam", lr=0.001)


@dataclass
class DetectorConfig:
    patch_size: int = 8
    expansion: int = 100


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: Optional[OptimizerSpec] = None  # None: template default
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    warmup_epochs: int = 10
    total_epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.2
    cache_path: Optional[str] = None
    # Restrict the attention term to the first k samples of each batch
    # (None: every sample contributes).
    ria_samples_per_batch: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigurationError(
                f"need 0 <= warmup_epochs <= total_epochs, got "
                f"{self.warmup_epochs} and {self.total_epochs}"
            )
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")

    def resolved_optimizer(self) -> OptimizerSpec:
        return self.optimizer or default_optimizer(self.model.template)


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["loss"]["lambda"] = d["loss"].pop("lam")
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = json.loads(json.dumps(d))  # deep copy, reject non-JSON values
    loss = d.get("loss", {})
    if "lambda" in loss:
        loss["lam"] = loss.pop("lambda")
    kwargs = {}
    if "model" in d:
        kwargs["model"] = ModelConfig(**d["model"])
    if loss:
        kwargs["loss"] = LossConfig(**loss)
    if d.get("optimizer") is not None:
        kwargs["optimizer"] = OptimizerSpec(**d["optimizer"])
    if "detector" in d:
        kwargs["detector"] = DetectorConfig(**d["detector"])
    for key in ("dataset", "warmup_epochs", "total_epochs", "batch_size", "seed",
                "val_fraction", "cache_path", "ria_samples_per_batch"):
        if key in d:
            kwargs[key] = d[key]
    unknown = set(d) - {"model", "loss", "optimizer", "detector"} - set(kwargs)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**kwargs)


def load_train_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return config_from_dict(raw)


def config_hash(cfg: TrainConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def resolve_dataset(spec: dict) -> Dataset:
    """Materialize the dataset named by a config spec dict."""
    kind = spec.get("kind")
    if kind == "synthetic":
        kwargs = {}
        if "background_bias" in spec:
            kwargs["background_bias"] = spec["background_bias"]
        return generate_synthetic_dataset(
            num_classes=spec.get("classes", 10),
            per_class=spec.get("per_class", 200),
            image_size=spec.get("size", 64),
            seed=spec.get("seed", 0),
            background=spec.get("background", "blotch"),
            **kwargs,
        )
    if kind == "folder":
        if "path" not in spec:
            raise ConfigurationError("folder dataset spec needs a 'path'")
        return load_image_folder(spec["path"])
    raise ConfigurationError(f"unknown dataset kind {kind!r}")


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic sample order for one epoch; part of the training contract."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_optimizer(model, spec: OptimizerSpec):
    if spec.name == "adam":
        return torch.optim.Adam(model.parameters(), lr=spec.lr)
    return torch.optim.SGD(model.parameters(), lr=spec.lr, momentum=spec.momentum)


def ensure_cache(dataset: Dataset, cfg: TrainConfig) -> DetectionCache:
    """Load the detection cache or build it once over the whole dataset."""
    extractor = ColorStatDescriptor(cfg.detector.patch_size)
    k = cfg.detector.expansion
    if cfg.cache_path and Path(cfg.cache_path).exists():
        cache = load_cache(cfg.cache_path, extractor, k)  # StaleCacheError on mismatch
        logger.info("loaded detection cache %s (%d boxes)", cfg.cache_path, len(cache.entries))
        return cache
    logger.info("precomputing detector boxes for %d images", len(dataset))
    cache = precompute_cache(dataset, extractor, cfg.cache_path, k)
    if cfg.cache_path:
        logger.info("wrote detection cache %s", cfg.cache_path)
    return cache


@dataclass
class TrainResult:
    model: object
    step_rows: list
    epoch_rows: list
    checkpoints: list
    out_dir: Optional[Path]
    cache: Optional[DetectionCache]

    @property
    def final_checkpoint(self) -> Optional[Path]:
        return self.checkpoints[-1] if self.checkpoints else None


class _CsvLog:
    """Append-only CSV writer that survives resume."""

    def __init__(self, path: Optional[Path], fields, append: bool):
        self.path = path
        self.fields = fields
        if path is None:
            self.fh = None
            return
        exists = path.exists() and append
        self.fh = open(path, "a" if append else "w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=fields)
        if not exists:
            self.writer.writeheader()

    def row(self, values: dict):
        if self.fh is None:
            return
        self.writer.writerow(values)
        self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def train(config: TrainConfig, out_dir=None, resume=None,
          dataset: Optional[Dataset] = None) -> TrainResult:
    """Run the two-stage procedure and return the trained model plus logs.

    Epochs below warmup_epochs optimize cross-entropy alone; afterwards the
    soft attention loss joins with weight beta. Detector boxes come from the
    cache (built on first use and frozen). out_dir, when given, receives
    steps.csv, epochs.csv, and one checkpoint per epoch. dataset overrides the
    config's dataset spec, for callers that already hold one in memory.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    data = dataset if dataset is not None else resolve_dataset(config.dataset)
    if data.num_classes != config.model.num_classes:
        raise ConfigurationError(
            f"dataset has {data.num_classes} classes but the model expects "
            f"{config.model.num_classes}"
        )
    if data.image_size != config.model.input_size:
        raise ConfigurationError(
            f"dataset images are {data.image_size}px but the model expects "
            f"{config.model.input_size}px"
        )
    train_ds, val_ds = stratified_split(data, config.val_fraction, config.seed)
    image_size = data.image_size

    ria_active = config.loss.beta > 0 and config.warmup_epochs < config.total_epochs
    cache = ensure_cache(data, config) if ria_active else None

    start_epoch = 0
    torch.manual_seed(config.seed)
    if resume is not None:
        model, opt_state, stored_cfg, last_epoch = load_checkpoint(resume)
        if stored_cfg.model != config.model:
            raise ConfigurationError(
                "checkpoint was trained with a different model config; refusing to resume"
            )
        optimizer = make_optimizer(model, config.resolved_optimizer())
        if opt_state is not None:
            optimizer.load_state_dict(opt_state)
        start_epoch = last_epoch + 1
    else:
        model = build_model(config.model)
        optimizer = make_optimizer(model, config.resolved_optimizer())

    steps_log = _CsvLog(out / "steps.csv" if out else None, STEP_FIELDS,
                        append=resume is not None)
    epochs_log = _CsvLog(out / "epochs.csv" if out else None, EPOCH_FIELDS,
                         append=resume is not None)

    n_train = len(train_ds)
    steps_per_epoch = (n_train + config.batch_size - 1) // config.batch_size
    step = start_epoch * steps_per_epoch
    step_rows, epoch_rows, checkpoints = [], [], []
    missing_ids: set = set()

    try:
        for epoch in range(start_epoch, config.total_epochs):
            beta_eff = 0.0 if epoch < config.warmup_epochs else config.loss.beta
            loss_cfg = replace(config.loss, beta=beta_eff)
            order = epoch_order(n_train, config.seed, epoch)
            correct = 0
            agg = {k: 0.0 for k in ("total", "ce", "ria", "iou_hat", "diag", "skip_rate")}

            for lo in range(0, n_train, config.batch_size):
                batch = [train_ds[i] for i in order[lo : lo + config.batch_size]]
                images, labels = to_batch(batch)

                if beta_eff > 0:
                    logits, captured = forward_with_capture(model, images)
                else:
                    logits = model(images)
                ce = F.cross_entropy(logits, labels)

                if beta_eff > 0:
                    top1 = logits.argmax(dim=1).detach()
                    heatmaps = heatmaps_from_capture(
                        logits, captured, top1, (image_size, image_size),
                        create_graph=True,
                    )
                    limit = config.ria_samples_per_batch or len(batch)
                    boxes = []
                    for j, sample in enumerate(batch):
                        if j >= limit:
                            boxes.append(None)
                            continue
                        b = cache.get(sample.image_id)
                        if b is None and sample.image_id not in missing_ids:
                            logger.warning(
                                "no detector box for %s; skipping its attention term",
                                sample.image_id,
                            )
                            missing_ids.add(sample.image_id)
                        boxes.append(b)
                    ria_res = ria_soft_batch(heatmaps, boxes, loss_cfg)
                    total, bd = total_loss(
                        ce, ria_res.loss, loss_cfg,
                        iou_hat_value=ria_res.mean_iou_hat,
                        diag_value=ria_res.mean_diag,
                        skipped=ria_res.skipped,
                    )
                else:
                    total, bd = total_loss(ce, 0.0, loss_cfg)

                optimizer.zero_grad()
                total.backward()
                optimizer.step()

                correct += int((logits.argmax(dim=1) == labels).sum())
                row = {
                    "step": step, "epoch": epoch,
                    "total": f"{bd.total:.6f}", "ce": f"{bd.ce:.6f}",
                    "ria": f"{bd.ria:.6f}", "iou_hat": f"{bd.iou_hat:.6f}",
                    "diag": f"{bd.diag_penalty:.6f}", "skip_rate": f"{bd.skip_rate:.4f}",
                }
                steps_log.row(row)
                step_rows.append(row)
                for key, val in (("total", bd.total), ("ce", bd.ce), ("ria", bd.ria),
                                 ("iou_hat", bd.iou_hat), ("diag", bd.diag_penalty),
                                 ("skip_rate", bd.skip_rate)):
                    agg[key] += val
                step += 1

            train_acc = correct / n_train
            val_acc = accuracy(model, val_ds.samples)
            ckpt_path = None
            if out is not None:
                ckpt_path = out / f"ckpt_epoch_{epoch:03d}.npz"
                save_checkpoint(model, optimizer, config, epoch, ckpt_path)
                checkpoints.append(ckpt_path)
            erow = {
                "epoch": epoch,
                "train_acc": f"{train_acc:.6f}", "val_acc": f"{val_acc:.6f}",
                **{k: f"{agg[k] / steps_per_epoch:.6f}" for k in
                   ("total", "ce", "ria", "iou_hat", "diag", "skip_rate")},
                "checkpoint": ckpt_path.name if ckpt_path else "",
            }
            epochs_log.row(erow)
            epoch_rows.append(erow)
            logger.info("epoch %d: train_acc=%.4f val_acc=%.4f", epoch, train_acc, val_acc)
    finally:
        steps_log.close()
        epochs_log.close()

    return TrainResult(model=model, step_rows=step_rows, epoch_rows=epoch_rows,
                       checkpoints=checkpoints, out_dir=out, cache=cache)


def save_checkpoint(model, optimizer, config: TrainConfig, epoch: int, path) -> None:
    """Model parameters, optimizer state, and the full config in one npz."""
    opt_sd = optimizer.state_dict()
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for pid, st in opt_sd["state"].items():
        for key, val in st.items():
            if isinstance(val, torch.Tensor):
                arrays[f"opt/{pid}/{key}"] = val.detach().cpu().numpy()
    meta = {
        "format": TRAIN_CHECKPOINT_FORMAT,
        "version": TRAIN_CHECKPOINT_VERSION,
        "epoch": epoch,
        "train_config": config_to_dict(config),
        "param_groups": opt_sd["param_groups"],
        "opt_scalar_state": {
            str(pid): {k: v for k, v in st.items() if not isinstance(v, torch.Tensor)}
            for pid, st in opt_sd["state"].items()
        },
    }
    write_npz(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Inverse of save_checkpoint.

    Returns (model, optimizer_state_dict_or_None, TrainConfig, epoch).
    """
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"][()]))
        if meta.get("format") != TRAIN_CHECKPOINT_FORMAT:
            raise ConfigurationError(f"{path} is not a training checkpoint")
        if meta.get("version") != TRAIN_CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')}")
        config = config_from_dict(meta["train_config"])
        model = build_model(config.model)
        state = {
            k[len("param/"):]: torch.from_numpy(data[k].copy())
            for k in data.files if k.startswith("param/")
        }
        model.load_state_dict(state)
        opt_state = None
        opt_keys = [k for k in data.files if k.startswith("opt/")]
        if opt_keys or meta.get("opt_scalar_state"):
            state_map: dict = {}
            for k in opt_keys:
                _, pid, name = k.split("/", 2)
                state_map.setdefault(int(pid), {})[name] = torch.from_numpy(data[k].copy())
            for pid, scalars in meta.get("opt_scalar_state", {}).items():
                state_map.setdefault(int(pid), {}).update(scalars)
            opt_state = {"state": state_map, "param_groups": meta["param_groups"]}
    return model, opt_state, config, meta["epoch"]
