"""Contrast-limited adaptive histogram equalization.

Classic tile-based scheme: the image is divided into a grid of tiles, each
tile gets a clipped histogram whose excess is redistributed across bins, the
per-tile mapping is the cumulative distribution, and every pixel blends the
four surrounding tile mappings bilinearly (clamped at the borders).

Pinned details, so an independent reimplementation can reproduce results
exactly:
  * input values lie in [0, 1]; bin index is floor(v * bins) capped at bins-1
  * the clip limit is ceil(n/bins) + round(clip_fraction * (n - ceil(n/bins)))
    with n the pixel count per tile
  * excess counts are redistributed by repeatedly scanning the bins in order
    and incrementing any bin still below the limit, one count at a time
  * the tile mapping is cumsum(hist) / n
  * images whose sides are not multiples of the tile grid are edge-padded at
    the bottom/right before tiling and cropped afterwards
"""

from __future__ import annotations

import numpy as np


def clip_histogram(hist, clip_limit):
    """Clip bins at clip_limit and redistribute the excess; returns a copy."""
    hist = hist.astype(np.int64, copy=True)
    excess = int(np.maximum(hist - clip_limit, 0).sum())
    np.minimum(hist, clip_limit, out=hist)
    while excess > 0:
        below = np.flatnonzero(hist < clip_limit)
        if below.size == 0:
            break
        take = below[:excess]
        hist[take] += 1
        excess -= take.size
    return hist


def _tile_mappings(img, tiles, clip_fraction, bins):
    ty, tx = tiles
    h, w = img.shape
    th, tw = h // ty, w // tx
    n = th * tw
    min_clip = int(np.ceil(n / bins))
    clip_limit = min_clip + int(round(clip_fraction * (n - min_clip)))
    binned = np.minimum((img * bins).astype(np.int64), bins - 1)
    np.maximum(binned, 0, out=binned)
    luts = np.empty((ty, tx, bins), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = binned[i * th : (i + 1) * th, j * tw : (j + 1) * tw]
            hist = np.bincount(tile.reshape(-1), minlength=bins)
            hist = clip_histogram(hist, clip_limit)
            luts[i, j] = np.cumsum(hist) / n
    return luts, binned


def clahe(img, tiles=(8, 8), clip_fraction=0.01, bins=256):
    """Equalize a 2D image with values in [0, 1]; returns float64 in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"clahe expects a 2D image, got shape {img.shape}")
    ty, tx = tiles
    h, w = img.shape
    pad_h = (-h) % ty
    pad_w = (-w) % tx
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w)), mode="edge")
    hp, wp = img.shape
    th, tw = hp // ty, wp // tx

    luts, binned = _tile_mappings(img, tiles, clip_fraction, bins)

    # fractional position of each pixel in tile-center coordinates
    gy = (np.arange(hp) + 0.5) / th - 0.5
    gx = (np.arange(wp) + 0.5) / tw - 0.5
    gy = np.clip(gy, 0.0, ty - 1.0)
    gx = np.clip(gx, 0.0, tx - 1.0)
    y0 = np.floor(gy).astype(np.int64)
    x0 = np.floor(gx).astype(np.int64)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    wy = (gy - y0)[:, None]
    wx = (gx - x0)[None, :]

    y0 = y0[:, None]
    y1 = y1[:, None]
    x0 = x0[None, :]
    x1 = x1[None, :]
    out = (
        (1 - wy) * ((1 - wx) * luts[y0, x0, binned] + wx * luts[y0, x1, binned])
        + wy * ((1 - wx) * luts[y1, x0, binned] + wx * luts[y1, x1, binned])
    )
    return out[:h, :w]
