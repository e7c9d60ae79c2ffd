"""Spatial-context extraction and scan-level dataset splitting.

A spatial context is an ordered slab of o slice indices centred on a target
slice, with neighbours spaced in whole slices so that their physical
distance reaches the requested step d.  When d is not an exact multiple of
the slice thickness the step rounds to the more distant slice, i.e.
ceil(d / thickness); the rounding rule lives in ``slice_step`` so the
alternative convention is a one-line change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SpatialContext:
    scan_id: str
    center: int
    members: tuple
    step_mm: float

    def __post_init__(self):
        if len(self.members) % 2 == 0:
            raise ValueError(f"context must have an odd member count, got {len(self.members)}")
        if self.members[len(self.members) // 2] != self.center:
            raise ValueError(
                f"middle member {self.members[len(self.members) // 2]} != centre {self.center}"
            )


def slice_step(d_mm, thickness_mm):
    """Step between context members in slices: ceil(d/thickness), at least 1."""
    if d_mm <= 0 or thickness_mm <= 0:
        raise ValueError(f"d and thickness must be positive, got d={d_mm}, thickness={thickness_mm}")
    return max(1, math.ceil(d_mm / thickness_mm))


def extract_contexts(volume, scan_id, centers, o, d_mm, mode="train"):
    """Spatial contexts for every requested centre slice.

    centers: iterable of slice indices ("within the organ area" for
    training), or None for all slices.  mode "train" skips contexts with
    out-of-bounds members; mode "infer" clamps members to [0, D-1] instead
    (edge replication).
    """
    if o < 1 or o % 2 == 0:
        raise ValueError(f"o must be odd and positive, got {o}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    depth = volume.dims[0]
    step = slice_step(d_mm, volume.thickness)
    half = (o - 1) // 2
    if centers is None:
        centers = range(depth)
    out = []
    for k in centers:
        members = [k + j * step for j in range(-half, half + 1)]
        if mode == "train":
            if members[0] < 0 or members[-1] >= depth:
                continue
        else:
            members = [min(max(m, 0), depth - 1) for m in members]
        out.append(SpatialContext(scan_id, int(k), tuple(int(m) for m in members), float(d_mm)))
    return out


def organ_slice_range(mask):
    """Centre-slice range for training: first to last mask-positive slice."""
    positive = np.flatnonzero(mask.data.reshape(mask.data.shape[0], -1).any(axis=1))
    if positive.size == 0:
        return range(0)
    return range(int(positive[0]), int(positive[-1]) + 1)


@dataclass
class ScanSplit:
    train: tuple
    validation: tuple
    test: tuple


def split_by_scan(scan_ids, fold_spec, seed, test_fold=0, val_fraction=0.1):
    """Partition scans into train/validation/test with no scan in two sets.

    fold_spec is either an integer number of folds (seeded shuffle, round
    robin) or an explicit sequence of disjoint id sequences.  ``test_fold``
    selects the test fold; validation takes ``val_fraction`` of the
    remaining scans (at least one when the fraction is positive).
    """
    scan_ids = list(scan_ids)
    if len(set(scan_ids)) != len(scan_ids):
        raise ValueError("duplicate scan ids")
    rng = np.random.Generator(np.random.PCG64(seed))

    if isinstance(fold_spec, int):
        if fold_spec < 1:
            raise ValueError(f"fold count must be >= 1, got {fold_spec}")
        order = [scan_ids[i] for i in rng.permutation(len(scan_ids))]
        folds = [order[i::fold_spec] for i in range(fold_spec)]
    else:
        folds = [list(f) for f in fold_spec]
        seen = set()
        for f in folds:
            for sid in f:
                if sid in seen:
                    raise ValueError(f"scan id {sid!r} appears in more than one fold")
                if sid not in set(scan_ids):
                    raise ValueError(f"fold references unknown scan id {sid!r}")
                seen.add(sid)
    if not 0 <= test_fold < len(folds):
        raise ValueError(f"test fold {test_fold} out of range for {len(folds)} folds")

    test = list(folds[test_fold])
    rest = [sid for sid in scan_ids if sid not in set(test)]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    n_val = 0
    if val_fraction > 0 and rest:
        n_val = max(1, int(round(val_fraction * len(rest))))
        n_val = min(n_val, len(rest) - 1) if len(rest) > 1 else 0
    validation = rest[:n_val]
    train = rest[n_val:]
    return ScanSplit(tuple(train), tuple(validation), tuple(test))
