"""Assembly of network inputs and targets from volumes and spatial contexts.

Member slices are resampled from native resolution to the network grid first
and normalized afterwards, so the statistics match what the network sees.
Targets are the centre-slice masks on the same grid (bilinear + 0.5
threshold).
"""

from __future__ import annotations

import numpy as np

from .preprocess import DEFAULT_WINDOW, preprocess_slice, resample_inplane


def context_input(volume, ctx, resolution, window=DEFAULT_WINDOW):
    """Network input [o,1,R,R] float32 for one spatial context."""
    slabs = []
    for m in ctx.members:
        raw = volume.data[m].astype(np.float64)
        small = resample_inplane(raw, resolution, "intensity")
        slabs.append(preprocess_slice(small, window=window)[None])
    return np.stack(slabs, axis=0)


def context_target(mask, ctx, resolution):
    """Centre-slice mask [R,R] float32 on the network grid."""
    center = mask.data[ctx.center]
    return resample_inplane(center, resolution, "mask").astype(np.float32)


def build_samples(volume, mask, contexts, resolution, window=DEFAULT_WINDOW):
    """(input, target) pairs for a list of contexts of one scan."""
    return [
        (context_input(volume, ctx, resolution, window), context_target(mask, ctx, resolution))
        for ctx in contexts
    ]
