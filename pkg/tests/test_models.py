"""Model templates, activation capture, gradient capture, and checkpointing."""

import numpy as np
import pytest
import torch

from oracles import central_difference

from ria.errors import ConfigurationError, InputError
from ria.models import (ModelConfig, backward_capture, build_model, forward_with_capture,
                        load_model, read_checkpoint_meta, save_model)


class TestBuildModel:
    def test_logit_shape(self):
        model = build_model(ModelConfig(template="tiny-cnn-3block", num_classes=10, seed=7))
        out = model(torch.zeros(4, 3, 64, 64))
        assert out.shape == (4, 10)
        assert len(model.stages) == 3

    def test_same_seed_same_parameters(self):
        cfg = ModelConfig(num_classes=10, seed=7)
        a, b = build_model(cfg), build_model(cfg)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = build_model(ModelConfig(seed=1))
        b = build_model(ModelConfig(seed=2))
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_unknown_template_rejected(self):
        with pytest.raises(ConfigurationError):
            build_model(ModelConfig(template="unknown"))

    def test_bad_capture_layer_rejected(self):
        with pytest.raises(ConfigurationError):
            build_model(ModelConfig(capture_layer="block9"))

    def test_num_classes_floor(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(num_classes=1)

    def test_vgg_template(self):
        model = build_model(ModelConfig(template="tiny-vgg", num_classes=5, input_size=32))
        logits, cap = forward_with_capture(model, torch.zeros(2, 3, 32, 32))
        assert logits.shape == (2, 5)
        assert cap.activations.shape[0] == 2


class TestForwardWithCapture:
    def test_shapes(self, small_model):
        images = torch.rand(4, 3, 64, 64)
        logits, cap = forward_with_capture(small_model, images)
        assert logits.shape == (4, 3)
        n, k, h, w = cap.activations.shape
        assert n == 4 and (h, w) == (16, 16)

    def test_capture_matches_plain_forward(self, small_model):
        images = torch.rand(2, 3, 64, 64)
        logits, _ = forward_with_capture(small_model, images)
        assert torch.equal(logits, small_model(images))

    def test_zero_image_bias_free_network(self):
        model = build_model(ModelConfig(num_classes=3, seed=0))
        with torch.no_grad():
            for module in model.modules():
                if hasattr(module, "bias") and module.bias is not None:
                    module.bias.zero_()
        logits, cap = forward_with_capture(model, torch.zeros(1, 3, 64, 64))
        assert torch.all(logits == 0)
        assert torch.all(cap.activations == 0)

    def test_duplicated_rows_identical(self, small_model):
        one = torch.rand(1, 3, 64, 64)
        logits, _ = forward_with_capture(small_model, one.repeat(3, 1, 1, 1))
        assert torch.equal(logits[0], logits[1]) and torch.equal(logits[1], logits[2])

    def test_wrong_shape_rejected(self, small_model):
        with pytest.raises(InputError):
            forward_with_capture(small_model, torch.zeros(1, 3, 32, 32))
        with pytest.raises(InputError):
            forward_with_capture(small_model, torch.zeros(1, 1, 64, 64))


class TestBackwardCapture:
    def test_gradient_shape(self, small_model):
        images = torch.rand(1, 3, 64, 64)
        logits, cap = forward_with_capture(small_model, images)
        grads = backward_capture(logits, cap, int(logits.argmax()))
        assert grads.shape == cap.activations.shape
        assert cap.gradients is grads

    def test_unused_channel_zero_gradient(self):
        model = build_model(ModelConfig(num_classes=3, seed=0))
        with torch.no_grad():
            model.head.weight[:, 0] = 0.0  # class logits ignore channel 0 entirely
        logits, cap = forward_with_capture(model, torch.rand(1, 3, 64, 64))
        grads = backward_capture(logits, cap, 1)
        assert torch.all(grads[:, 0] == 0)
        assert grads.abs().sum() > 0

    def test_per_sample_class_indices(self, small_model):
        images = torch.rand(3, 3, 64, 64)
        logits, cap = forward_with_capture(small_model, images)
        grads_vec = backward_capture(logits, cap, torch.tensor([0, 1, 2])).clone()
        for i in range(3):
            logits_i, cap_i = forward_with_capture(small_model, images[i : i + 1])
            g = backward_capture(logits_i, cap_i, i)
            assert torch.allclose(grads_vec[i], g[0], atol=1e-6)

    def test_index_out_of_range(self, small_model):
        logits, cap = forward_with_capture(small_model, torch.rand(1, 3, 64, 64))
        with pytest.raises(InputError):
            backward_capture(logits, cap, 3)

    def test_gradients_match_finite_differences(self):
        # One conv layer with hand-set weights, one class head: bump each
        # activation entry and compare the captured analytic gradient against
        # central differences.
        torch.manual_seed(5)
        model = build_model(ModelConfig(num_classes=2, input_size=8, seed=5))
        images = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        model = model.double()
        logits, cap = forward_with_capture(model, images)
        target = 1
        grads = backward_capture(logits, cap, target)

        acts = cap.activations.detach().cpu().numpy()

        def logit_of(flat_acts):
            a = torch.from_numpy(flat_acts.reshape(acts.shape))
            with torch.no_grad():
                return float(model.head(a.mean(dim=(2, 3)))[0, target])

        numeric = central_difference(logit_of, acts.ravel(), h=1e-3).reshape(acts.shape)
        np.testing.assert_allclose(grads.detach().numpy(), numeric, atol=1e-4)


class TestCheckpoint:
    def test_roundtrip_preserves_logits(self, small_model, tmp_path):
        images = torch.rand(2, 3, 64, 64)
        before = small_model(images)
        path = tmp_path / "model.npz"
        save_model(small_model, path)
        restored = load_model(path)
        after = restored(images)
        assert torch.equal(before, after)

    def test_meta_describes_model(self, small_model, tmp_path):
        path = tmp_path / "model.npz"
        save_model(small_model, path)
        meta = read_checkpoint_meta(path)
        assert meta["format"] == "ria-model"
        assert meta["model_config"]["num_classes"] == 3

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.npz"
        np.savez(path, a=np.zeros(3))
        with pytest.raises(ConfigurationError):
            read_checkpoint_meta(path)

    def test_save_is_deterministic(self, small_model, tmp_path):
        p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
        save_model(small_model, p1)
        save_model(small_model, p2)
        assert p1.read_bytes() == p2.read_bytes()
