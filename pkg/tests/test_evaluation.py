import itertools

import numpy as np
import pytest

from seqseg.data.synth import synth_generate
from seqseg.evaluation import (
    EvalRow,
    dice_and_voe,
    evaluate_volume,
    format_report_table,
    format_significance_matrix,
    threshold_prediction,
    voe_from_dice,
    wilcoxon_signed_rank,
    write_report_csv,
)


def wilcoxon_oracle(a, b):
    """Exact enumeration over all sign assignments of the non-zero ranks."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    diff = diff[diff != 0]
    n = diff.size
    if n == 0:
        return 1.0
    absd = np.abs(diff)
    order = np.argsort(absd, kind="stable")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    total = ranks.sum()
    w_plus = ranks[diff > 0].sum()
    t_obs = min(w_plus, total - w_plus)
    count = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for s, r in zip(signs, ranks) if s)
        if min(w, total - w) <= t_obs + 1e-9:
            count += 1
    return count / 2**n


class TestThreshold:
    def test_examples(self):
        probs = np.array([0.9, 0.75, 0.5, 0.7500001])
        included = threshold_prediction(probs)
        assert included.tolist() == [True, False, False, True]

    def test_monotone_in_probability(self, rng):
        p = rng.random((10, 10))
        base = threshold_prediction(p)
        raised = threshold_prediction(np.clip(p + 0.1, 0, 1))
        assert np.all(base <= raised)


class TestDiceVoe:
    def test_identical_nonempty(self, rng):
        s = rng.random((16, 16)) > 0.5
        assert dice_and_voe(s, s) == (1.0, 0.0)

    def test_disjoint_nonempty(self):
        a = np.eye(8, dtype=bool)
        d, voe = dice_and_voe(a, ~a)
        assert d == 0.0 and voe == 1.0

    def test_empty_empty(self):
        z = np.zeros((4, 4), dtype=bool)
        assert dice_and_voe(z, z) == (1.0, 0.0)

    def test_printed_pair_from_results_table(self):
        # one published pair: Dice 94.3% corresponds to VOE 10.8%
        assert voe_from_dice(0.943) * 100 == pytest.approx(10.8, abs=0.1)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError, match="grid"):
            dice_and_voe(np.zeros((4, 4), bool), np.zeros((5, 4), bool))

    def test_monotone_under_growing_disagreement(self):
        truth = np.zeros((8, 8), dtype=bool)
        truth[2:6, 2:6] = True
        dices = []
        for extra in range(4):
            pred = truth.copy()
            pred[0, :extra] = True  # false positives grow
            d, _ = dice_and_voe(pred, truth)
            dices.append(d)
        assert dices == sorted(dices, reverse=True)


class TestWilcoxon:
    def test_identical_samples(self):
        assert wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4, 5]) == 1.0

    def test_single_smallest_rank_negative_n6(self):
        # ranks 1..6 with exactly one negative difference at rank 1:
        # statistic 1, exact p = 4/64
        a = [1.9, 3.0, 4.0, 5.0, 6.0, 7.0]
        b = [2.0, 1.0, 1.0, 1.0, 1.0, 1.0]
        assert wilcoxon_signed_rank(a, b) == pytest.approx(4 / 64, abs=1e-12)

    def test_constant_shift_n12(self):
        b = np.arange(12, dtype=float)
        a = b + 0.5
        assert wilcoxon_signed_rank(a, b) < 0.01

    def test_symmetry(self, rng):
        for _ in range(20):
            a = rng.standard_normal(9)
            b = rng.standard_normal(9)
            assert wilcoxon_signed_rank(a, b) == pytest.approx(
                wilcoxon_signed_rank(b, a), abs=1e-12
            )

    @pytest.mark.parametrize("n", [5, 6, 8, 10])
    def test_matches_enumeration_oracle(self, n, rng):
        for _ in range(25):
            a = rng.standard_normal(n)
            b = rng.standard_normal(n)
            assert wilcoxon_signed_rank(a, b) == pytest.approx(
                wilcoxon_oracle(a, b), abs=1e-9
            )

    def test_matches_enumeration_with_ties(self, rng):
        for _ in range(25):
            a = rng.integers(0, 4, size=8).astype(float)
            b = rng.integers(0, 4, size=8).astype(float)
            assert wilcoxon_signed_rank(a, b) == pytest.approx(
                wilcoxon_oracle(a, b), abs=1e-9
            )

    def test_matches_scipy_exact_when_clean(self, rng):
        scipy_stats = pytest.importorskip("scipy.stats")
        for _ in range(10):
            a = rng.standard_normal(9)
            b = rng.standard_normal(9)
            ours = wilcoxon_signed_rank(a, b)
            ref = scipy_stats.wilcoxon(a, b, alternative="two-sided", method="exact").pvalue
            assert ours == pytest.approx(ref, abs=1e-9)

    def test_zero_differences_dropped(self):
        a = [1.0, 2.0, 3.0, 4.0, 10.0, 20.0]
        b = [1.0, 2.0, 3.0, 4.0, 11.0, 19.0]
        # only two non-zero differences remain
        assert wilcoxon_signed_rank(a, b) == pytest.approx(wilcoxon_oracle(a, b), abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="equal length"):
            wilcoxon_signed_rank([1, 2], [1, 2, 3])


def checker_mask(depth, size, lo, hi):
    data = np.zeros((depth, size, size), dtype=np.uint8)
    data[lo:hi, size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 1
    return data


class TestEvaluateVolume:
    def setup_method(self):
        self.vol, self.mask = synth_generate(1, (16, 32, 32), (2.0, 1.0, 1.0), seed=3)[0]

    def test_oracle_predictions_perfect_scores(self):
        mask = self.mask

        def oracle_predict(slices, ctx):
            return mask.data[ctx.center].astype(np.float64)

        for regime in ("organ-area", "full-volume"):
            row = evaluate_volume(
                oracle_predict, self.vol, mask, regime, o=3, d_mm=4.0, resolution=32
            )
            assert row.dice == 1.0 and row.voe == 0.0

    def test_all_zero_predictions(self):
        def zero_predict(slices, ctx):
            return np.zeros((32, 32))

        row = evaluate_volume(
            zero_predict, self.vol, self.mask, "organ-area", o=3, d_mm=4.0, resolution=32
        )
        assert row.dice == 0.0 and row.voe == 1.0

    def test_organ_area_subset_of_full_volume(self):
        def zero_predict(slices, ctx):
            return np.zeros((32, 32))

        organ = evaluate_volume(
            zero_predict, self.vol, self.mask, "organ-area", o=3, d_mm=4.0, resolution=32
        )
        full = evaluate_volume(
            zero_predict, self.vol, self.mask, "full-volume", o=3, d_mm=4.0, resolution=32
        )
        assert organ.slice_count <= full.slice_count
        assert full.slice_count == 16

    def test_contexts_clamp_at_boundaries(self):
        seen = []

        def probe(slices, ctx):
            seen.append(ctx.members)
            return np.zeros((32, 32))

        evaluate_volume(probe, self.vol, self.mask, "full-volume", o=3, d_mm=4.0, resolution=32)
        assert seen[0] == (0, 0, 2)
        assert all(0 <= m < 16 for members in seen for m in members)

    def test_dims_mismatch_rejected(self):
        from seqseg.data.volume import MaskVolume

        bad = MaskVolume(np.zeros((15, 32, 32), dtype=np.uint8), (2.0, 1.0, 1.0))

        def f(slices, ctx):
            return np.zeros((32, 32))

        with pytest.raises(ValueError, match="dims"):
            evaluate_volume(f, self.vol, bad, "full-volume", o=3, d_mm=4.0, resolution=32)

    def test_unknown_regime(self):
        with pytest.raises(ValueError, match="regime"):
            evaluate_volume(lambda s, c: None, self.vol, self.mask, "liver", 3, 4.0, 32)


class TestReports:
    def test_csv_and_table(self, tmp_path):
        rows = [
            EvalRow("scan_a", "organ-area", 0.953, voe_from_dice(0.953), 12),
            EvalRow("scan_a", "full-volume", 0.943, voe_from_dice(0.943), 20),
        ]
        write_report_csv(tmp_path / "r.csv", rows)
        text = (tmp_path / "r.csv").read_text()
        assert "scan_a,organ-area,95.3" in text
        table = format_report_table({"scan_a": {r.regime: r for r in rows}})
        assert "scan_a" in table and "average" in table
        assert "95.3" in table and "10.8" in table

    def test_significance_matrix_layout(self):
        a = list(np.linspace(0.9, 0.96, 8))
        b = [v - 0.02 for v in a]
        text = format_significance_matrix(["m5", "m7"], [a, b])
        lines = text.splitlines()
        assert len(lines) == 3
        assert lines[1].count("inf") == 1 and lines[2].count("inf") == 1
        p = wilcoxon_signed_rank(a, b)
        assert f"{p:.4f}" in text
