"""Small convolutional classifiers with a capturable last convolutional stage.

Every template is built as an ordered sequence of named stages followed by a
global-average-pool classification head. The activations of one named stage
(by default the last convolutional one) can be captured during the forward
pass and their gradients recovered afterwards, which is the only contract the
rest of the toolkit relies on. None of the templates use batch normalization
or dropout, so per-sample gradients are exact and runs are deterministic.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputError
from .npz import write_npz

CHECKPOINT_FORMAT = "ria-model"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    template: str = "tiny-cnn-3block"
    num_classes: int = 10
    in_channels: int = 3
    input_size: int = 64
    seed: int = 0
    # None selects the template's last convolutional stage.
    capture_layer: Optional[str] = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass
class CapturedActivations:
    """Activations of the capture stage and, after a backward pass, their gradients."""

    activations: torch.Tensor
    gradients: Optional[torch.Tensor] = None
    class_index: Optional[torch.Tensor] = None


def _conv_block(cin, cout, pool):
    layers = [nn.Conv2d(cin, cout, kernel_size=3, padding=1), nn.ReLU()]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def _double_conv_block(cin, cout, pool):
    layers = [
        nn.Conv2d(cin, cout, kernel_size=3, padding=1),
        nn.ReLU(),
        nn.Conv2d(cout, cout, kernel_size=3, padding=1),
        nn.ReLU(),
    ]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def _tiny_cnn_3block(cfg: ModelConfig):
    stages = OrderedDict(
        block1=_conv_block(cfg.in_channels, 16, pool=True),
        block2=_conv_block(16, 32, pool=True),
        block3=_conv_block(32, 64, pool=False),
    )
    return stages, 64, "block3"


def _tiny_vgg(cfg: ModelConfig):
    stages = OrderedDict(
        block1=_double_conv_block(cfg.in_channels, 16, pool=True),
        block2=_double_conv_block(16, 32, pool=True),
        block3=_double_conv_block(32, 48, pool=False),
    )
    return stages, 48, "block3"


TEMPLATES = {
    "tiny-cnn-3block": _tiny_cnn_3block,
    "tiny-vgg": _tiny_vgg,
}


class ConvClassifier(nn.Module):
    """Named convolutional stages, then global average pooling and a linear head."""

    def __init__(self, stages: "OrderedDict[str, nn.Module]", head_in: int,
                 config: ModelConfig, capture_layer: str):
        super().__init__()
        self.stages = nn.ModuleDict(stages)
        self.head = nn.Linear(head_in, config.num_classes)
        self.config = config
        self.capture_layer = capture_layer

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages.values():
            x = stage(x)
        return self.head(x.mean(dim=(2, 3)))


def build_model(config: ModelConfig) -> ConvClassifier:
    """Instantiate a template, deterministically given config.seed."""
    if config.template not in TEMPLATES:
        known = ", ".join(sorted(TEMPLATES))
        raise ConfigurationError(f"unknown model template {config.template!r} (known: {known})")
    torch.manual_seed(config.seed)
    stages, head_in, default_capture = TEMPLATES[config.template](config)
    capture = config.capture_layer or default_capture
    if capture not in stages:
        raise ConfigurationError(f"capture_layer {capture!r} not a stage of {config.template!r}")
    return ConvClassifier(stages, head_in, config, capture)


def _check_input(model: ConvClassifier, images: torch.Tensor):
    cfg = model.config
    if images.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise InputError(
            f"expected images of shape (N, {cfg.in_channels}, H, W), got {tuple(images.shape)}"
        )
    if images.shape[2] != cfg.input_size or images.shape[3] != cfg.input_size:
        raise InputError(
            f"model expects {cfg.input_size}x{cfg.input_size} input, "
            f"got {images.shape[2]}x{images.shape[3]}"
        )


def forward_with_capture(model: ConvClassifier, images: torch.Tensor):
    """Forward pass that also returns the capture-stage activations.

    The activations stay attached to the autograd graph, so gradients with
    respect to them can be taken later via backward_capture. Not reentrant on
    one model instance: use independent instances for parallel inference.

    Returns:
        (logits, CapturedActivations)
    """
    _check_input(model, images)
    x = images
    captured = None
    for name, stage in model.stages.items():
        x = stage(x)
        if name == model.capture_layer:
            captured = x
    logits = model.head(x.mean(dim=(2, 3)))
    return logits, CapturedActivations(activations=captured)


def backward_capture(logits: torch.Tensor, captured: CapturedActivations,
                     class_index: Union[int, torch.Tensor],
                     create_graph: bool = False) -> torch.Tensor:
    """Fill captured.gradients with d(logit of the chosen class) / d(activations).

    class_index is one class per sample (an int broadcasts over the batch).
    With create_graph=True the returned gradients participate in further
    differentiation, which the training loss relies on.
    """
    n, num_classes = logits.shape
    idx = torch.as_tensor(class_index, dtype=torch.long, device=logits.device)
    if idx.ndim == 0:
        idx = idx.expand(n)
    if idx.shape != (n,):
        raise InputError(f"class_index must be scalar or length {n}, got shape {tuple(idx.shape)}")
    if bool((idx < 0).any()) or bool((idx >= num_classes).any()):
        raise InputError(f"class index out of range [0, {num_classes})")
    # Samples are independent through the network, so one summed backward pass
    # yields every per-sample gradient exactly.
    selected = logits.gather(1, idx.unsqueeze(1)).sum()
    grads = torch.autograd.grad(
        selected, captured.activations, create_graph=create_graph, retain_graph=True
    )[0]
    captured.gradients = grads
    captured.class_index = idx
    return grads


def _flatten_state(state_dict):
    return {f"param/{k}": v.detach().cpu().numpy() for k, v in state_dict.items()}


def save_model(model: ConvClassifier, path) -> None:
    """Write parameters plus config to an npz archive; loading reproduces logits exactly."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
    }
    arrays = _flatten_state(model.state_dict())
    write_npz(path, __meta__=np.array(json.dumps(meta)), **arrays)


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as data:
        if "__meta__" not in data:
            raise ConfigurationError(f"{path} is not a toolkit checkpoint")
        return json.loads(str(data["__meta__"][()]))


def load_model(path) -> ConvClassifier:
    """Rebuild a model from save_model output."""
    with np.load(path) as data:
        meta = json.loads(str(data["__meta__"][()]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(
                f"unexpected checkpoint format {meta.get('format')!r} in {path}"
            )
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig(**meta["model_config"])
        model = build_model(config)
        state = {
            k[len("param/"):]: torch.from_numpy(data[k].copy())
            for k in data.files
            if k.startswith("param/")
        }
        model.load_state_dict(state)
    return model
