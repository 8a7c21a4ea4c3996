import numpy as np
import pytest
import torch

from ria.data import generate_synthetic_dataset
from ria.models import ModelConfig, build_model


@pytest.fixture(scope="session")
def small_dataset():
    """3 classes x 8 images at 64px; enough for end-to-end paths, fast to build."""
    return generate_synthetic_dataset(num_classes=3, per_class=8, image_size=64, seed=11)


@pytest.fixture()
def small_model():
    return build_model(ModelConfig(num_classes=3, input_size=64, seed=3))


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
