"""Independent reference implementations that pin expected test values.

Everything here deliberately avoids the library's code paths: components via
recursive flood fill, box overlap via explicit pixel-set counting, bilinear
interpolation via the direct half-pixel formula, and derivatives via central
finite differences. Slow and obvious beats fast and shared.
"""

import math
import sys

import numpy as np

sys.setrecursionlimit(20000)


def flood_fill_labels(mask):
    """Label 8-connected regions by recursive flood fill.

    Returns (labels, count) where labels is -1 on background and the
    component id elsewhere, ids assigned in row-major order of discovery.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = -np.ones((h, w), dtype=np.int64)

    def fill(y, x, label):
        if y < 0 or y >= h or x < 0 or x >= w:
            return
        if not mask[y, x] or labels[y, x] >= 0:
            return
        labels[y, x] = label
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy or dx:
                    fill(y + dy, x + dx, label)

    count = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] and labels[y, x] < 0:
                fill(y, x, count)
                count += 1
    return labels, count


def flood_fill_pixel_sets(mask):
    """The same labeling as a set of frozensets of (row, col) pixels."""
    labels, count = flood_fill_labels(mask)
    groups = []
    for label in range(count):
        ys, xs = np.nonzero(labels == label)
        groups.append(frozenset(zip(ys.tolist(), xs.tolist())))
    return set(groups)


def box_pixel_set(x_min, y_min, x_max, y_max):
    """Every (x, y) pixel covered by an inclusive box, as a set."""
    return {(x, y) for x in range(x_min, x_max + 1) for y in range(y_min, y_max + 1)}


def iou_by_counting(a, b):
    """IoU from explicit pixel sets; a and b are (x_min, y_min, x_max, y_max)."""
    pa, pb = box_pixel_set(*a), box_pixel_set(*b)
    return len(pa & pb) / len(pa | pb)


def iou_hat_by_counting(b_od, b_gc):
    """Intersection over the attention box's own pixel count."""
    pa, pb = box_pixel_set(*b_od), box_pixel_set(*b_gc)
    return len(pa & pb) / len(pb)


def bilinear_half_pixel(src, out_h, out_w):
    """Direct bilinear resampling with half-pixel-aligned sample centers.

    Output pixel (oy, ox) samples the source at
    ((oy + 0.5) * H/out_h - 0.5, (ox + 0.5) * W/out_w - 0.5) with edge
    clamping, which is the standard convention for image resizing without
    corner alignment.
    """
    src = np.asarray(src, dtype=np.float64)
    in_h, in_w = src.shape

    def at(y, x):
        return src[min(max(y, 0), in_h - 1), min(max(x, 0), in_w - 1)]

    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        sy = (oy + 0.5) * in_h / out_h - 0.5
        y0 = math.floor(sy)
        ty = sy - y0
        for ox in range(out_w):
            sx = (ox + 0.5) * in_w / out_w - 0.5
            x0 = math.floor(sx)
            tx = sx - x0
            out[oy, ox] = (
                at(y0, x0) * (1 - ty) * (1 - tx)
                + at(y0 + 1, x0) * ty * (1 - tx)
                + at(y0, x0 + 1) * (1 - ty) * tx
                + at(y0 + 1, x0 + 1) * ty * tx
            )
    return out


def central_difference(f, x, h=1e-3):
    """Gradient of scalar f at flat numpy vector x by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        bumped = x.copy()
        bumped[i] += h
        hi = f(bumped)
        bumped[i] -= 2 * h
        lo = f(bumped)
        grad[i] = (hi - lo) / (2 * h)
    return grad


def uniform_block_stats(lo, hi):
    """Mean and standard deviation of the discrete uniform over lo..hi inclusive."""
    n = hi - lo + 1
    mean = (lo + hi) / 2.0
    std = math.sqrt((n * n - 1) / 12.0)
    return mean, std
