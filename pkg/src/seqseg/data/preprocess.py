"""Per-slice preprocessing and in-plane resampling.

The normalization pipeline, applied to every sequence element independently:
clip to the intensity window, rescale the window to [0, 1], contrast-limited
adaptive histogram equalization, subtract the slice mean, divide by the
slice standard deviation (guarded for constant slices).
"""

from __future__ import annotations

import numpy as np

from .clahe import clahe

DEFAULT_WINDOW = (-100.0, 400.0)
_STD_EPS = 1e-7


def preprocess_slice(slice2d, window=DEFAULT_WINDOW, tiles=(8, 8), clip_fraction=0.01, bins=256):
    """Windowed, CLAHE-equalized, zero-mean unit-std slice as float32."""
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got {window}")
    x = np.asarray(slice2d, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"preprocess_slice expects a 2D slice, got shape {x.shape}")
    x = np.clip(x, lo, hi)
    x = (x - lo) / (hi - lo)
    x = clahe(x, tiles=tiles, clip_fraction=clip_fraction, bins=bins)
    x = x - x.mean()
    std = x.std()
    x = x / max(std, _STD_EPS)
    return x.astype(np.float32)


def resample_inplane(image, target, kind):
    """Bilinear square resize; masks and probabilities binarize at 0.5.

    kind "intensity" returns the interpolated float map; "mask" and
    "probability" threshold the interpolated values at 0.5 and return uint8.
    """
    if kind not in ("intensity", "mask", "probability"):
        raise ValueError(f"unknown resample kind {kind!r}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"resample_inplane expects a 2D image, got shape {img.shape}")
    t = int(target)
    if t < 1:
        raise ValueError(f"target size must be positive, got {target}")
    h, w = img.shape
    if (h, w) == (t, t):
        out = img
    else:
        ys = np.clip((np.arange(t) + 0.5) * h / t - 0.5, 0.0, h - 1.0)
        xs = np.clip((np.arange(t) + 0.5) * w / t - 0.5, 0.0, w - 1.0)
        y0 = np.floor(ys).astype(np.int64)
        x0 = np.floor(xs).astype(np.int64)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = (ys - y0)[:, None]
        wx = (xs - x0)[None, :]
        ia = img[np.ix_(y0, x0)]
        ib = img[np.ix_(y0, x1)]
        ic = img[np.ix_(y1, x0)]
        id_ = img[np.ix_(y1, x1)]
        out = (1 - wy) * ((1 - wx) * ia + wx * ib) + wy * ((1 - wx) * ic + wx * id_)
    if kind == "intensity":
        return out.astype(np.float32)
    return (out >= 0.5).astype(np.uint8)
