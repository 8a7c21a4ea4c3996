"""Channel weighting, map combination, upsampling, and the full saliency pipeline."""

from collections import OrderedDict

import numpy as np
import pytest
import torch
from torch import nn

from oracles import bilinear_half_pixel

from ria.errors import InputError
from ria.gradcam import (channel_weights, gradcam, gradcam_batch, raw_heatmap,
                         upsample_normalize)
from ria.models import (CapturedActivations, ConvClassifier, ModelConfig, backward_capture,
                        build_model, forward_with_capture)


class TestChannelWeights:
    def test_constant_gradient_gives_that_constant(self):
        grads = torch.full((1, 3, 4, 4), 0.7)
        w = channel_weights(grads)
        assert torch.allclose(w, torch.full((1, 3), 0.7))

    def test_zero_gradients(self):
        assert torch.all(channel_weights(torch.zeros(1, 5, 2, 2)) == 0)

    def test_2x2_slab_mean(self):
        grads = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert float(channel_weights(grads)[0, 0]) == pytest.approx(2.5)

    def test_requires_backward_first(self, small_model):
        _, cap = forward_with_capture(small_model, torch.rand(1, 3, 64, 64))
        with pytest.raises(InputError):
            channel_weights(cap)


class TestRawHeatmap:
    def test_relu_on_single_channel(self):
        acts = torch.tensor([[[[1.0, -2.0], [0.0, 3.0]]]])
        out = raw_heatmap(acts, torch.ones(1, 1))
        assert torch.equal(out, torch.tensor([[[1.0, 0.0], [0.0, 3.0]]]))

    def test_opposite_weights_cancel(self):
        a = torch.rand(1, 1, 3, 3)
        acts = torch.cat([a, a], dim=1)
        out = raw_heatmap(acts, torch.tensor([[1.0, -1.0]]))
        assert torch.all(out == 0)

    def test_two_channel_hand_example(self):
        acts = torch.tensor([[[[2.0]], [[-0.5]]]])
        out = raw_heatmap(acts, torch.tensor([[0.5, 2.0]]))
        assert float(out) == pytest.approx(0.0)  # 1 - 1 = 0, then ReLU

    def test_weight_shape_mismatch(self):
        with pytest.raises(InputError):
            raw_heatmap(torch.zeros(1, 2, 3, 3), torch.zeros(1, 3))


class TestUpsampleNormalize:
    def test_constant_map_normalizes_to_one(self):
        out = upsample_normalize(torch.full((3, 3), 0.25), (9, 9))
        assert torch.allclose(out, torch.ones(9, 9), atol=1e-6)

    def test_corner_peak_decays_monotonically(self):
        out = upsample_normalize(torch.tensor([[0.0, 0.0], [0.0, 1.0]]), (4, 4))
        assert float(out[3, 3]) == pytest.approx(1.0)
        diag = [float(out[i, i]) for i in range(4)]
        assert diag == sorted(diag)
        assert diag[0] < 0.2

    def test_all_zero_stays_zero(self):
        out = upsample_normalize(torch.zeros(2, 2), (8, 8))
        assert torch.all(out == 0)

    def test_matches_half_pixel_reference(self, rng):
        src = rng.random((5, 7))
        out = upsample_normalize(torch.from_numpy(src), (20, 28)).numpy()
        ref = bilinear_half_pixel(src, 20, 28)
        ref = ref / (ref.max() + 1e-8)
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_scaling_raw_map_changes_nothing(self, rng):
        src = torch.from_numpy(rng.random((4, 4)))
        a = upsample_normalize(src, (8, 8))
        b = upsample_normalize(src * 37.0, (8, 8))
        assert torch.allclose(a, b, atol=1e-12)

    def test_batch_dimension_preserved(self):
        out = upsample_normalize(torch.rand(3, 4, 4), (16, 16))
        assert out.shape == (3, 16, 16)


def _one_conv_fixture():
    """1x1-conv network whose saliency map has a pencil-and-paper closed form."""
    config = ModelConfig(template="tiny-cnn-3block", num_classes=2, in_channels=1,
                         input_size=4, seed=0, capture_layer="block1")
    conv = nn.Conv2d(1, 2, kernel_size=1, bias=False)
    with torch.no_grad():
        conv.weight[:] = torch.tensor([2.0, -1.0]).view(2, 1, 1, 1)
    stages = OrderedDict(block1=nn.Sequential(conv))
    model = ConvClassifier(stages, head_in=2, config=config, capture_layer="block1")
    with torch.no_grad():
        model.head.weight[:] = torch.tensor([[1.0, 0.5], [1.5, 0.5]])
        model.head.bias.zero_()
    return model


class TestGradcamPipeline:
    def test_one_conv_closed_form(self, rng):
        # With a 1x1 conv and a mean-pool head, channel k's activation is
        # w_k * x and the class-c gradient at the capture stage is
        # head[c, k] / (H*W) everywhere. The whole pipeline collapses to
        # relu(sum_k head[c,k] * w_k * x / 16) normalized by its max.
        model = _one_conv_fixture()
        image = rng.random((4, 4, 1)).astype(np.float32)
        hm = gradcam(model, image, class_choice=1)

        x = image[:, :, 0].astype(np.float64)
        coeff = (1.5 * 2.0 + 0.5 * (-1.0)) / 16.0
        expected = np.maximum(coeff * x, 0.0)
        expected = expected / (expected.max() + 1e-8)
        np.testing.assert_allclose(hm.values, expected, atol=1e-6)
        assert hm.class_index == 1
        assert hm.source_size == (4, 4)

    def test_shape_and_range(self, small_model, rng):
        image = rng.random((64, 64, 3)).astype(np.float32)
        hm = gradcam(small_model, image)
        assert hm.shape == (64, 64)
        assert hm.values.min() >= 0.0 and hm.values.max() <= 1.0 + 1e-6
        assert hm.source_size == (16, 16)

    def test_deterministic(self, small_model, rng):
        image = rng.random((64, 64, 3)).astype(np.float32)
        a = gradcam(small_model, image)
        b = gradcam(small_model, image)
        np.testing.assert_array_equal(a.values, b.values)
        assert a.class_index == b.class_index

    def test_nonzero_map_peaks_at_one(self, small_model, rng):
        image = rng.random((64, 64, 3)).astype(np.float32)
        hm = gradcam(small_model, image)
        if hm.values.any():
            assert hm.values.max() == pytest.approx(1.0, abs=1e-5)

    def test_batch_agrees_with_single(self, small_model, rng):
        images = torch.from_numpy(
            rng.random((3, 3, 64, 64)).astype(np.float32)
        )
        maps, classes, logits = gradcam_batch(small_model, images)
        assert maps.shape == (3, 64, 64)
        for i in range(3):
            single = gradcam(small_model, images[i])
            np.testing.assert_allclose(maps[i].numpy(), single.values, atol=1e-5)
            assert int(classes[i]) == single.class_index

    def test_explicit_class_choice(self, small_model, rng):
        image = rng.random((64, 64, 3)).astype(np.float32)
        hm = gradcam(small_model, image, class_choice=2)
        assert hm.class_index == 2

    def test_create_graph_keeps_heatmaps_differentiable(self, small_model):
        images = torch.rand(2, 3, 64, 64)
        maps, _, _ = gradcam_batch(small_model, images, create_graph=True)
        assert maps.requires_grad
        loss = maps.sum()
        grads = torch.autograd.grad(loss, list(small_model.parameters()), allow_unused=True)
        assert any(g is not None and g.abs().sum() > 0 for g in grads)


class TestCaptureGradcamConsistency:
    def test_weights_match_manual_autograd(self, small_model):
        images = torch.rand(1, 3, 64, 64)
        logits, cap = forward_with_capture(small_model, images)
        target = int(logits.argmax())
        backward_capture(logits, cap, target)
        w = channel_weights(cap)

        logits2, cap2 = forward_with_capture(small_model, images)
        grad = torch.autograd.grad(logits2[0, target], cap2.activations)[0]
        assert torch.allclose(w, grad.mean(dim=(2, 3)), atol=1e-7)
