"""Attention-guided classifier training and noise-robustness evaluation.

The toolkit trains image classifiers whose Grad-CAM attention is pulled
toward boxes proposed by an unsupervised object detector, and measures the
resulting foreground reliance by corrupting one image region at a time.
"""

from .boxes import (Box, SoftBox, binarize, connected_components, heatmap_box,
                    select_box, soft_box, soft_box_to_rect)
from .data import (Dataset, Sample, generate_synthetic_dataset, load_image_folder,
                   save_dataset_folder, stratified_split)
from .errors import ConfigurationError, DataError, InputError, RiaError, StaleCacheError
from .evaluation import accuracy, mean_gradcam_box_iou, predict
from .gradcam import Heatmap, gradcam, gradcam_batch
from .losses import (LossConfig, diag_penalty, iou, iou_hat, ria_hard, ria_soft,
                     ria_soft_batch, total_loss)
from .lost import (ColorStatDescriptor, Detection, DetectionCache, detect_box,
                   load_cache, precompute_cache)
from .models import ModelConfig, build_model, forward_with_capture, load_model, save_model
from .noise import (NoiseReport, add_region_noise, compare_models, noise_report, rfs,
                    write_comparison)
from .training import (OptimizerSpec, TrainConfig, TrainResult, load_checkpoint,
                       load_train_config, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "Box", "SoftBox", "binarize", "connected_components", "heatmap_box",
    "select_box", "soft_box", "soft_box_to_rect",
    "Dataset", "Sample", "generate_synthetic_dataset", "load_image_folder",
    "save_dataset_folder", "stratified_split",
    "ConfigurationError", "DataError", "InputError", "RiaError", "StaleCacheError",
    "accuracy", "mean_gradcam_box_iou", "predict",
    "Heatmap", "gradcam", "gradcam_batch",
    "LossConfig", "diag_penalty", "iou", "iou_hat", "ria_hard", "ria_soft",
    "ria_soft_batch", "total_loss",
    "ColorStatDescriptor", "Detection", "DetectionCache", "detect_box",
    "load_cache", "precompute_cache",
    "ModelConfig", "build_model", "forward_with_capture", "load_model", "save_model",
    "NoiseReport", "add_region_noise", "compare_models", "noise_report", "rfs",
    "write_comparison",
    "OptimizerSpec", "TrainConfig", "TrainResult", "load_checkpoint",
    "load_train_config", "save_checkpoint", "train",
    "__version__",
]
