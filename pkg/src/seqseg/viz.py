"""PNG export: grayscale slices, prediction/ground-truth overlays and
feature-map grids.

Overlay colours: red = prediction outline, green = ground-truth outline,
yellow = where the two outlines overlap.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(img01):
    return np.clip(np.asarray(img01, dtype=np.float64) * 255.0, 0, 255).astype(np.uint8)


def save_png_gray(path, img01):
    Image.fromarray(to_uint8(img01), mode="L").save(path)


def save_png_rgb(path, rgb_uint8):
    Image.fromarray(np.asarray(rgb_uint8, dtype=np.uint8), mode="RGB").save(path)


def load_png(path):
    return np.asarray(Image.open(path))


def mask_outline(mask):
    """Boundary pixels: foreground with at least one 4-neighbour background."""
    m = np.asarray(mask, dtype=bool)
    interior = m.copy()
    interior[1:, :] &= m[:-1, :]
    interior[:-1, :] &= m[1:, :]
    interior[:, 1:] &= m[:, :-1]
    interior[:, :-1] &= m[:, 1:]
    # image-border foreground pixels count as boundary
    interior[0, :] = False
    interior[-1, :] = False
    interior[:, 0] = False
    interior[:, -1] = False
    return m & ~interior


def normalize_slice(slice2d, window=(-100.0, 400.0)):
    lo, hi = window
    x = np.clip(np.asarray(slice2d, dtype=np.float64), lo, hi)
    return (x - lo) / (hi - lo)


def overlay_image(slice01, pred_mask, gt_mask=None):
    """RGB overlay of a grayscale slice with outline colours per the legend."""
    base = to_uint8(slice01)
    rgb = np.stack([base, base, base], axis=-1)
    pred_edge = mask_outline(pred_mask)
    if gt_mask is not None:
        gt_edge = mask_outline(gt_mask)
        both = pred_edge & gt_edge
        rgb[pred_edge & ~both] = (255, 0, 0)
        rgb[gt_edge & ~both] = (0, 255, 0)
        rgb[both] = (255, 255, 0)
    else:
        rgb[pred_edge] = (255, 0, 0)
    return rgb


def feature_grid(maps01):
    """Tile [C,H,W] maps (already in [0,1]) into one near-square 2D image."""
    maps = np.asarray(maps01, dtype=np.float64)
    c, h, w = maps.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    grid = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1))
    for i in range(c):
        r, col = divmod(i, cols)
        grid[r * (h + 1) : r * (h + 1) + h, col * (w + 1) : col * (w + 1) + w] = maps[i]
    return grid
