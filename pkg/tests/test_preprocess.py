import numpy as np
import pytest

from seqseg.data.clahe import clahe, clip_histogram
from seqseg.data.preprocess import preprocess_slice, resample_inplane
from seqseg.evaluation import dice_and_voe


def clahe_oracle(img, tiles=(8, 8), clip_fraction=0.01, bins=256):
    """Per-pixel reference implementation with explicit loops."""
    img = np.asarray(img, dtype=np.float64)
    ty, tx = tiles
    h, w = img.shape
    pad_h = (-h) % ty
    pad_w = (-w) % tx
    padded = np.pad(img, ((0, pad_h), (0, pad_w)), mode="edge")
    hp, wp = padded.shape
    th, tw = hp // ty, wp // tx
    n = th * tw
    min_clip = int(np.ceil(n / bins))
    clip_limit = min_clip + int(round(clip_fraction * (n - min_clip)))

    def bin_of(v):
        return min(int(v * bins), bins - 1)

    luts = np.empty((ty, tx, bins))
    for i in range(ty):
        for j in range(tx):
            hist = [0] * bins
            for y in range(i * th, (i + 1) * th):
                for x in range(j * tw, (j + 1) * tw):
                    hist[max(bin_of(padded[y, x]), 0)] += 1
            excess = sum(max(c - clip_limit, 0) for c in hist)
            hist = [min(c, clip_limit) for c in hist]
            while excess > 0:
                placed = False
                for b in range(bins):
                    if hist[b] < clip_limit:
                        hist[b] += 1
                        excess -= 1
                        placed = True
                        if excess == 0:
                            break
                if not placed:
                    break
            cdf = np.cumsum(hist) / n
            luts[i, j] = cdf

    out = np.empty((hp, wp))
    for y in range(hp):
        gy = min(max((y + 0.5) / th - 0.5, 0.0), ty - 1.0)
        i0 = int(np.floor(gy))
        i1 = min(i0 + 1, ty - 1)
        wy = gy - i0
        for x in range(wp):
            gx = min(max((x + 0.5) / tw - 0.5, 0.0), tx - 1.0)
            j0 = int(np.floor(gx))
            j1 = min(j0 + 1, tx - 1)
            wx = gx - j0
            b = max(bin_of(padded[y, x]), 0)
            out[y, x] = (1 - wy) * ((1 - wx) * luts[i0, j0, b] + wx * luts[i0, j1, b]) + wy * (
                (1 - wx) * luts[i1, j0, b] + wx * luts[i1, j1, b]
            )
    return out[:h, :w]


class TestClahe:
    def test_constant_slice_stays_constant(self):
        out = clahe(np.full((32, 32), 0.37))
        assert np.unique(out).size == 1

    def test_checkerboard_stays_two_valued(self):
        y, x = np.mgrid[0:64, 0:64]
        board = ((y + x) % 2).astype(np.float64) * 0.8 + 0.1
        out = clahe(board)
        assert np.unique(np.round(out, 12)).size <= 2

    def test_monotone_ramp_monotone_within_tile(self):
        img = np.tile(np.linspace(0, 1, 64), (64, 1))
        out = clahe(img, tiles=(8, 8))
        # inside one tile the mapping is a cdf, hence nondecreasing along the ramp
        tile = out[4:8, 0:8]
        diffs = np.diff(tile, axis=1)
        assert np.all(diffs >= -1e-12)

    @pytest.mark.parametrize("shape", [(32, 32), (40, 56), (30, 17)])
    def test_matches_reference_implementation(self, shape, rng):
        img = rng.random(shape)
        np.testing.assert_allclose(
            clahe(img, tiles=(4, 4), bins=64),
            clahe_oracle(img, tiles=(4, 4), bins=64),
            atol=1e-12,
        )

    def test_output_range(self, rng):
        out = clahe(rng.random((64, 64)))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_clip_histogram_preserves_mass(self, rng):
        hist = rng.integers(0, 50, size=64)
        # the pipeline's clip limit is always >= ceil(total/bins), which
        # guarantees the clipped histogram can absorb the excess
        clip = int(np.ceil(hist.sum() / hist.size)) + 5
        clipped = clip_histogram(hist, clip)
        assert clipped.sum() == hist.sum()
        assert clipped.max() <= clip


class TestPreprocessSlice:
    def test_window_clips_before_equalization(self, rng):
        base = rng.uniform(-100, 400, size=(32, 32))
        hot = base.copy()
        hot[3, 3] = 500.0  # clips to the window ceiling
        clipped = base.copy()
        clipped[3, 3] = 400.0
        np.testing.assert_array_equal(preprocess_slice(hot), preprocess_slice(clipped))

    def test_zero_mean_unit_std(self, rng):
        out = preprocess_slice(rng.uniform(-150, 500, size=(64, 64)))
        assert abs(float(out.mean())) < 1e-5
        assert abs(float(out.std()) - 1.0) < 1e-4

    def test_constant_slice_all_zeros(self):
        out = preprocess_slice(np.full((32, 32), 120.0))
        np.testing.assert_array_equal(out, 0.0)

    def test_finite_and_shape_preserving(self, rng):
        x = rng.uniform(-2000, 3000, size=(48, 48))
        out = preprocess_slice(x)
        assert out.shape == (48, 48)
        assert np.all(np.isfinite(out))

    def test_bad_window_rejected(self, rng):
        with pytest.raises(ValueError, match="lo < hi"):
            preprocess_slice(rng.random((8, 8)), window=(10, 10))


class TestResample:
    def test_identity_when_sizes_match(self, rng):
        img = rng.random((16, 16))
        np.testing.assert_array_equal(resample_inplane(img, 16, "intensity"), img.astype(np.float32))

    def test_all_ones_mask_down_up(self):
        mask = np.ones((64, 64))
        down = resample_inplane(mask, 16, "mask")
        up = resample_inplane(down, 64, "mask")
        np.testing.assert_array_equal(up, 1)

    def test_small_bilinear_values(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = resample_inplane(img, 4, "intensity")
        # corners replicate edge values, centre blends all four
        assert out[0, 0] == 0.0 and out[3, 3] == 3.0
        assert abs(out[1, 1] - (0 * 0.5625 + 1 * 0.1875 + 2 * 0.1875 + 3 * 0.0625)) < 1e-6

    def test_disk_mask_512_128_512_dice(self):
        yy, xx = np.mgrid[0:512, 0:512]
        disk = (((yy - 256) ** 2 + (xx - 256) ** 2) <= 160**2).astype(np.float64)
        down = resample_inplane(disk, 128, "mask")
        up = resample_inplane(down, 512, "mask")
        d, _ = dice_and_voe(up.astype(bool), disk.astype(bool))
        assert d >= 0.95

    def test_probability_kind_binarizes(self, rng):
        probs = rng.random((32, 32))
        out = resample_inplane(probs, 16, "probability")
        assert set(np.unique(out)) <= {0, 1}

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError, match="kind"):
            resample_inplane(rng.random((8, 8)), 4, "nearest")
