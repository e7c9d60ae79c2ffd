"""Thresholded prediction sets, Dice / volume-overlap-error scores,
organ-area vs full-volume evaluation and Wilcoxon signed-rank comparison.

A pixel belongs to the predicted foreground set when |p - 1| < epsilon with
epsilon = 0.25, i.e. p > 0.75.  Scores per scan accumulate voxel counts over
the regime's slices; VOE is derived from Dice as 2(1-D)/(2-D).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data.contexts import organ_slice_range, slice_step
from .data.preprocess import DEFAULT_WINDOW, preprocess_slice, resample_inplane
from .data.contexts import SpatialContext

PREDICTION_EPSILON = 0.25
REGIMES = ("organ-area", "full-volume")


def threshold_prediction(probabilities, epsilon=PREDICTION_EPSILON):
    """Boolean foreground set: pixels with |p - 1| < epsilon (strict)."""
    p = np.asarray(probabilities)
    return np.abs(p - 1.0) < epsilon


def dice_and_voe(prediction_set, ground_truth_set):
    """(D, VOE) of two pixel sets on the same grid; empty vs empty gives (1, 0)."""
    pred = np.asarray(prediction_set, dtype=bool)
    truth = np.asarray(ground_truth_set, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError(f"dice_and_voe: grid mismatch {pred.shape} vs {truth.shape}")
    return _scores(int(np.logical_and(pred, truth).sum()), int(pred.sum()), int(truth.sum()))


def voe_from_dice(d):
    return 2.0 * (1.0 - d) / (2.0 - d)


def _scores(intersection, pred_count, truth_count):
    if pred_count + truth_count == 0:
        return 1.0, 0.0
    d = 2.0 * intersection / (pred_count + truth_count)
    return d, voe_from_dice(d)


@dataclass
class EvalRow:
    scan_id: str
    regime: str
    dice: float
    voe: float
    slice_count: int


def evaluate_volume(
    predict,
    volume,
    mask,
    regime,
    o,
    d_mm,
    resolution,
    window=DEFAULT_WINDOW,
    scan_id="scan",
    epsilon=PREDICTION_EPSILON,
):
    """Slide the o-slice context over the regime's slices and score the scan.

    predict(slices, ctx) maps preprocessed member slices [o,R,R] to a centre
    probability map [R,R].  Member indices clamp at the volume boundary.
    Predictions are thresholded at the model grid and upsampled to native
    resolution before counting.  regime "organ-area" restricts both sets to
    slices containing ground truth; "full-volume" uses every slice.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}, expected one of {REGIMES}")
    if volume.data.shape != mask.data.shape:
        raise ValueError(
            f"volume dims {volume.data.shape} != mask dims {mask.data.shape}"
        )
    native = volume.data.shape[1]
    if volume.data.shape[2] != native:
        raise ValueError(f"in-plane extents must be square, got {volume.data.shape}")

    if regime == "organ-area":
        slices = list(organ_slice_range(mask))
    else:
        slices = list(range(volume.data.shape[0]))

    step = slice_step(d_mm, volume.thickness)
    half = (o - 1) // 2
    depth = volume.data.shape[0]
    intersection = 0
    pred_count = 0
    truth_count = 0

    cache = {}

    def member_slice(m):
        if m not in cache:
            raw = volume.data[m].astype(np.float64)
            small = resample_inplane(raw, resolution, "intensity")
            cache[m] = preprocess_slice(small, window=window)
        return cache[m]

    for k in slices:
        members = tuple(min(max(k + j * step, 0), depth - 1) for j in range(-half, half + 1))
        ctx = SpatialContext(scan_id, k, members, float(d_mm))
        stack = np.stack([member_slice(m) for m in members], axis=0)
        probs = np.asarray(predict(stack, ctx))
        pred_small = threshold_prediction(probs, epsilon)
        pred_native = resample_inplane(pred_small.astype(np.float64), native, "mask").astype(bool)
        truth = mask.data[k].astype(bool)
        intersection += int(np.logical_and(pred_native, truth).sum())
        pred_count += int(pred_native.sum())
        truth_count += int(truth.sum())

    d, voe = _scores(intersection, pred_count, truth_count)
    return EvalRow(scan_id, regime, d, voe, len(slices))


# -- Wilcoxon signed-rank ------------------------------------------------------


def _average_ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


EXACT_ENUMERATION_LIMIT = 10


def wilcoxon_signed_rank(dice_a, dice_b):
    """Two-sided p-value for paired samples.

    Zero differences are dropped and ties share average ranks.  Up to 10
    non-zero differences the p-value comes from exact enumeration over all
    sign assignments; beyond that a normal approximation with tie and
    continuity corrections is used.  Degenerate input (no non-zero
    differences) yields p = 1.
    """
    a = np.asarray(dice_a, dtype=np.float64)
    b = np.asarray(dice_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1D of equal length, got {a.shape} and {b.shape}")
    diff = a - b
    diff = diff[diff != 0]
    n = diff.size
    if n == 0:
        return 1.0
    ranks = _average_ranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    t_obs = min(w_plus, w_minus)
    total = float(ranks.sum())

    if n <= EXACT_ENUMERATION_LIMIT:
        count = 0
        for bits in range(1 << n):
            w = 0.0
            for i in range(n):
                if bits >> i & 1:
                    w += ranks[i]
            if min(w, total - w) <= t_obs + 1e-9:
                count += 1
        return count / (1 << n)

    mu = n * (n + 1) / 4.0
    sigma_sq = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(diff), return_counts=True)
    sigma_sq -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    if sigma_sq <= 0:
        return 1.0
    z = (t_obs - mu + 0.5) / math.sqrt(sigma_sq)
    p = math.erfc(-z / math.sqrt(2.0))
    return min(1.0, p)


# -- report formatting ---------------------------------------------------------


def write_report_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scan_id", "regime", "dice_pct", "voe_pct", "slice_count"])
        for row in rows:
            writer.writerow(
                [row.scan_id, row.regime, f"{100 * row.dice:.4f}", f"{100 * row.voe:.4f}", row.slice_count]
            )


def format_report_table(rows_by_scan):
    """Aligned text table: one line per scan, organ-area and full-volume
    Dice/VOE columns, plus an average row."""
    header = f"{'scan':<12} {'OA D(%)':>8} {'OA VOE(%)':>10} {'FV D(%)':>8} {'FV VOE(%)':>10}"
    lines = [header, "-" * len(header)]
    acc = {("organ-area", "dice"): [], ("organ-area", "voe"): [],
           ("full-volume", "dice"): [], ("full-volume", "voe"): []}
    for scan_id, per_regime in rows_by_scan.items():
        cells = [f"{scan_id:<12}"]
        for regime in REGIMES:
            row = per_regime.get(regime)
            if row is None:
                cells.append(f"{'-':>8} {'-':>10}")
            else:
                cells.append(f"{100 * row.dice:>8.1f} {100 * row.voe:>10.1f}")
                acc[(regime, "dice")].append(row.dice)
                acc[(regime, "voe")].append(row.voe)
        lines.append(" ".join(cells))
    avg = [f"{'average':<12}"]
    for regime in REGIMES:
        ds = acc[(regime, "dice")]
        vs = acc[(regime, "voe")]
        if ds:
            avg.append(f"{100 * np.mean(ds):>8.1f} {100 * np.mean(vs):>10.1f}")
        else:
            avg.append(f"{'-':>8} {'-':>10}")
    lines.append(" ".join(avg))
    return "\n".join(lines)


def format_significance_matrix(names, dice_lists):
    """Pairwise Wilcoxon p-value matrix with an infinity-marked diagonal."""
    width = max(8, max(len(n) for n in names) + 1)
    lines = [" " * width + "".join(f"{n:>{width}}" for n in names)]
    for i, ni in enumerate(names):
        cells = [f"{ni:<{width}}"]
        for j in range(len(names)):
            if i == j:
                cells.append(f"{'inf':>{width}}")
            else:
                p = wilcoxon_signed_rank(dice_lists[i], dice_lists[j])
                cells.append(f"{p:>{width}.4f}")
        lines.append("".join(cells))
    return "\n".join(lines)
