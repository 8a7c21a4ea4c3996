"""Heatmap thresholding, component labeling, box selection, and the soft box."""

import math

import numpy as np
import pytest
import torch

from oracles import flood_fill_pixel_sets, uniform_block_stats

from ria.boxes import (Box, binarize, connected_components, heatmap_box, select_box,
                       soft_box, soft_box_to_rect, soft_mask)
from ria.errors import ConfigurationError


class TestBox:
    def test_inclusive_pixel_areas(self):
        assert Box(0, 0, 0, 0).area == 1
        assert Box(2, 3, 4, 5).width == 3
        assert Box(2, 3, 4, 5).height == 3
        assert Box(2, 3, 4, 5).area == 9

    def test_invalid_boxes_rejected(self):
        with pytest.raises(ValueError):
            Box(3, 0, 2, 0)
        with pytest.raises(ValueError):
            Box(-1, 0, 2, 2)

    def test_clip_and_mask(self):
        b = Box(5, 5, 20, 20).clip(10, 10)
        assert b == Box(5, 5, 9, 9)
        m = Box(1, 2, 3, 4).to_mask(6, 6)
        assert m.sum() == 3 * 3
        assert m[2, 1] and m[4, 3] and not m[1, 1]

    def test_contains(self):
        assert Box(0, 0, 9, 9).contains(Box(2, 2, 5, 5))
        assert not Box(2, 2, 5, 5).contains(Box(0, 0, 9, 9))


class TestBinarize:
    def test_strict_threshold_example(self):
        mask = binarize(np.array([[0.9, 0.1], [0.6, 0.5]]), threshold=0.5)
        # 0.5 itself is not above the threshold
        np.testing.assert_array_equal(mask.values, [[True, False], [True, False]])

    def test_all_zero(self):
        assert not binarize(np.zeros((4, 4)), 0.5).values.any()

    def test_threshold_bounds(self):
        for t in (0.0, 1.0, -0.2, 3.0):
            with pytest.raises(ConfigurationError):
                binarize(np.zeros((2, 2)), t)

    def test_raising_threshold_never_adds_pixels(self, rng):
        heat = rng.random((12, 12))
        low = binarize(heat, 0.3).values
        high = binarize(heat, 0.6).values
        assert not (high & ~low).any()


def _as_pixel_sets(components):
    return {frozenset(map(tuple, c.pixels.tolist())) for c in components}


class TestConnectedComponents:
    def test_diagonal_pixels_join(self):
        mask = np.array([[1, 0], [0, 1]], dtype=bool)
        assert len(connected_components(mask)) == 1

    def test_zero_row_separates(self):
        mask = np.array([[1], [0], [1]], dtype=bool)
        assert len(connected_components(mask)) == 2

    def test_exhaustive_3x3_against_flood_fill(self):
        for bits in range(512):
            mask = np.array([(bits >> i) & 1 for i in range(9)], dtype=bool).reshape(3, 3)
            got = _as_pixel_sets(connected_components(mask))
            assert got == flood_fill_pixel_sets(mask), f"mask bits {bits}"

    def test_random_16x16_against_flood_fill(self, rng):
        for density in (0.2, 0.5, 0.8):
            for _ in range(67):
                mask = rng.random((16, 16)) < density
                got = _as_pixel_sets(connected_components(mask))
                assert got == flood_fill_pixel_sets(mask)

    def test_boxes_are_tight(self, rng):
        mask = rng.random((16, 16)) < 0.4
        for comp in connected_components(mask):
            ys, xs = comp.pixels[:, 0], comp.pixels[:, 1]
            assert comp.box == Box(xs.min(), ys.min(), xs.max(), ys.max())


class TestSelectBox:
    def test_single_component_tight_box(self):
        heat = np.zeros((8, 8))
        heat[2:5, 3:6] = 0.9
        assert heatmap_box(heat, 0.5) == Box(3, 2, 5, 4)

    def test_mass_beats_peak(self):
        # Left blob: one bright pixel. Right blob: more pixels, more total mass,
        # lower peak. Mass scoring must pick the right blob.
        heat = np.zeros((8, 8))
        heat[1, 1] = 1.0
        heat[5:7, 4:8] = 0.7
        comps = connected_components(binarize(heat, 0.5))
        assert len(comps) == 2
        scores = {tuple(sorted(map(tuple, c.pixels.tolist()))):
                  float(heat[c.pixels[:, 0], c.pixels[:, 1]].sum()) for c in comps}
        assert max(scores.values()) == pytest.approx(0.7 * 8)
        assert select_box(heat, comps) == Box(4, 5, 7, 6)

    def test_tie_breaks_on_size_then_position(self):
        # Equal mass: 2 pixels at 0.8 vs 1 pixel at 1.6 is impossible in [0,1],
        # so use 2 x 0.8 against 2 x 0.8 at a later position: first tie level
        # (size) equal too, so the earlier (y, x) wins.
        heat = np.zeros((6, 6))
        heat[0, 0:2] = 0.8
        heat[4, 3:5] = 0.8
        box = heatmap_box(heat, 0.5)
        assert box == Box(0, 0, 1, 0)

    def test_empty_mask_gives_none(self):
        assert heatmap_box(np.zeros((5, 5)), 0.5) is None

    def test_shrinking_loses_pixels(self, rng):
        heat = rng.random((10, 10))
        comps = connected_components(binarize(heat, 0.5))
        box = select_box(heat, comps)
        assert box is not None
        chosen = [c for c in comps if c.box == box]
        pixels = np.concatenate([c.pixels for c in chosen])
        assert pixels[:, 0].min() == box.y_min and pixels[:, 0].max() == box.y_max
        assert pixels[:, 1].min() == box.x_min and pixels[:, 1].max() == box.x_max


class TestSoftBox:
    def test_sigmoid_mask_values(self):
        heat = torch.tensor([[0.5, 1.0]])
        m = soft_mask(heat, tau=0.1, threshold=0.5)
        assert float(m[0, 0]) == pytest.approx(0.5)
        assert float(m[0, 1]) == pytest.approx(1.0 / (1.0 + math.exp(-5.0)))

    def test_uniform_block_recovers_closed_form(self):
        # At small tau the sigmoid saturates and the mask is the block
        # indicator, so the coordinate statistics equal those of a discrete
        # uniform distribution over the block.
        heat = torch.zeros(32, 32)
        heat[10:18, 6:20] = 1.0  # rows 10..17, cols 6..19
        sb = soft_box(heat, tau=0.01, threshold=0.5)
        mu_x_ref, sigma_x_ref = uniform_block_stats(6, 19)
        mu_y_ref, sigma_y_ref = uniform_block_stats(10, 17)
        assert float(sb.center[0]) == pytest.approx(mu_x_ref, abs=1e-6)
        assert float(sb.center[1]) == pytest.approx(mu_y_ref, abs=1e-6)
        assert float(sb.extent[0]) == pytest.approx(sigma_x_ref, abs=1e-6)
        assert float(sb.extent[1]) == pytest.approx(sigma_y_ref, abs=1e-6)

    def test_mirror_symmetry_centers_mu_x(self, rng):
        half = torch.from_numpy(rng.random((16, 8)))
        heat = torch.cat([half, torch.flip(half, dims=[1])], dim=1)
        sb = soft_box(heat, tau=0.05, threshold=0.5)
        assert float(sb.center[0]) == pytest.approx((16 - 1) / 2.0, abs=1e-6)

    def test_all_zero_heatmap_degenerate_at_small_tau(self):
        # With tau small enough that sigmoid((0 - T)/tau) underflows, a flat
        # zero map carries no soft mass and signals a skip.
        assert soft_box(torch.zeros(16, 16), tau=0.01, threshold=0.5) is None

    def test_rect_recovers_block_within_one_pixel(self):
        heat = torch.zeros(32, 32)
        heat[4:13, 8:24] = 1.0
        sb = soft_box(heat, tau=0.01, threshold=0.5, kappa=math.sqrt(3.0))
        x0, y0, x1, y1 = (float(v) for v in soft_box_to_rect(sb))
        assert abs(x0 - 8) <= 1.0 and abs(x1 - 23) <= 1.0
        assert abs(y0 - 4) <= 1.0 and abs(y1 - 12) <= 1.0

    def test_zero_extent_rect_collapses_to_mu(self):
        heat = torch.zeros(16, 16)
        heat[5, 7] = 1.0
        sb = soft_box(heat, tau=0.01, threshold=0.5)
        x0, y0, x1, y1 = (float(v) for v in soft_box_to_rect(sb))
        assert x0 == pytest.approx(7.0, abs=1e-4) and x1 == pytest.approx(7.0, abs=1e-4)
        assert y0 == pytest.approx(5.0, abs=1e-4) and y1 == pytest.approx(5.0, abs=1e-4)

    def test_rect_always_inside_image(self, rng):
        for _ in range(20):
            heat = torch.from_numpy(rng.random((12, 12)) ** 0.25)  # mass near the edges
            sb = soft_box(heat, tau=0.05, threshold=0.5)
            x0, y0, x1, y1 = (float(v) for v in soft_box_to_rect(sb))
            assert 0.0 <= x0 <= x1 <= 11.0
            assert 0.0 <= y0 <= y1 <= 11.0

    def test_soft_hard_agreement_on_near_binary_blob(self, rng):
        # Single near-binary blobs: the soft rectangle and the hard selected
        # box must overlap strongly.
        from ria.losses import iou

        for trial in range(10):
            h0, w0 = rng.integers(2, 6), rng.integers(2, 6)
            y, x = rng.integers(1, 20 - 2 * h0), rng.integers(1, 20 - 2 * w0)
            heat = rng.random((20, 20)) * 0.04  # near-zero background
            heat[y : y + h0 + 2, x : x + w0 + 2] = 1.0 - rng.random((h0 + 2, w0 + 2)) * 0.04
            hard = heatmap_box(heat, 0.5)
            sb = soft_box(torch.from_numpy(heat), tau=0.05, threshold=0.5)
            x0, y0, x1, y1 = (float(v) for v in soft_box_to_rect(sb))
            rect = Box(round(x0), round(y0), round(x1), round(y1))
            assert iou(rect, hard) > 0.7, f"trial {trial}"
