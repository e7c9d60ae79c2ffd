"""Synthetic volumes for desk-scale training and evaluation.

Each volume contains one smooth bright "organ" blob (a union of overlapping
ellipsoids) over a darker textured background with additive noise; the mask
is the exact blob support.  Intensities are Hounsfield-like so the standard
[-100, 400] window applies.
"""

from __future__ import annotations

import numpy as np

from .volume import MaskVolume, Volume

DEFAULT_FRACTION_BAND = (0.05, 0.40)
_BACKGROUND_MEAN = -20.0
_ORGAN_OFFSET = 170.0


def _ellipsoid_support(dims, center, semi_axes):
    d, h, w = dims
    zz = (np.arange(d)[:, None, None] - center[0]) / semi_axes[0]
    yy = (np.arange(h)[None, :, None] - center[1]) / semi_axes[1]
    xx = (np.arange(w)[None, None, :] - center[2]) / semi_axes[2]
    return zz * zz + yy * yy + xx * xx <= 1.0


def _blob_mask(rng, dims):
    d, h, w = dims
    center = np.array(
        [
            d * rng.uniform(0.42, 0.58),
            h * rng.uniform(0.40, 0.60),
            w * rng.uniform(0.40, 0.60),
        ]
    )
    axes = np.array(
        [
            d * rng.uniform(0.22, 0.34),
            h * rng.uniform(0.18, 0.30),
            w * rng.uniform(0.18, 0.30),
        ]
    )
    support = _ellipsoid_support(dims, center, axes)
    for _ in range(rng.integers(2, 4)):
        offset = rng.uniform(-0.5, 0.5, size=3) * axes
        sub_axes = axes * rng.uniform(0.35, 0.6, size=3)
        support |= _ellipsoid_support(dims, center + offset, np.maximum(sub_axes, 1.0))
    return support


def _smooth_texture(rng, dims, coarse=4, amplitude=25.0):
    # blocky low-frequency field; realism is not the point, variation is
    cd = [max(2, s // coarse) for s in dims]
    field = rng.standard_normal(cd)
    for axis, (c, s) in enumerate(zip(cd, dims)):
        reps = int(np.ceil(s / c))
        field = np.repeat(field, reps, axis=axis)
    field = field[: dims[0], : dims[1], : dims[2]]
    return amplitude * field


def synth_generate(count, dims, spacing, seed, fraction_band=DEFAULT_FRACTION_BAND):
    """Deterministic list of (Volume, MaskVolume) pairs.

    The blob voxel fraction is kept inside ``fraction_band`` by redrawing
    shapes that land outside it.
    """
    dims = tuple(int(v) for v in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"dims must be three extents of at least 8, got {dims}")
    rng = np.random.Generator(np.random.PCG64(seed))
    lo, hi = fraction_band
    pairs = []
    for _ in range(count):
        for _attempt in range(50):
            mask = _blob_mask(rng, dims)
            fraction = mask.mean()
            if lo <= fraction <= hi:
                break
        else:
            raise RuntimeError(
                f"could not draw a blob with voxel fraction in [{lo}, {hi}] for dims {dims}"
            )
        intensities = (
            _BACKGROUND_MEAN
            + _smooth_texture(rng, dims)
            + 12.0 * rng.standard_normal(dims)
        )
        organ = _ORGAN_OFFSET + 10.0 * rng.standard_normal(dims)
        intensities = np.where(mask, organ, intensities).astype(np.float32)
        pairs.append(
            (Volume(intensities, spacing), MaskVolume(mask.astype(np.uint8), spacing))
        )
    return pairs
