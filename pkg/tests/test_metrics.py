"""Metric checks against exhaustive oracles, plus the CSV surface."""

import math

import numpy as np
import pytest

import oracles
from lesionseq import metrics
from lesionseq.metrics import (MetricsRecord, dice_score, hd95, percentile,
                               precision_recall, wilcoxon_signed_rank)


def random_blob(rng, shape=(12, 12, 12), n_seeds=3, radius=3.0) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    coords = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"))
    for _ in range(n_seeds):
        c = [rng.uniform(2, s - 3) for s in shape]
        r = rng.uniform(1.5, radius)
        d2 = sum((coords[i] - c[i]) ** 2 for i in range(3))
        mask |= d2 <= r * r
    return mask


class TestDiceScore:
    def test_identical_nonempty(self, rng):
        m = random_blob(rng)
        assert dice_score(m, m.copy()) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4), dtype=bool)
        b = np.zeros((4, 4, 4), dtype=bool)
        a[0, 0, 0] = True
        b[3, 3, 3] = True
        assert dice_score(a, b) == 0.0

    def test_half_overlap_fixture(self):
        gt = np.zeros((4, 4, 4), dtype=bool)
        gt[0, 0, :4] = True
        gt[0, 1, :4] = True          # 8 gt voxels
        pred = np.zeros((4, 4, 4), dtype=bool)
        pred[0, 0, :4] = True        # 4 inside
        pred[2, 2, :4] = True        # 4 outside
        assert dice_score(pred, gt) == 0.5

    def test_empty_empty_convention(self):
        z = np.zeros((3, 3, 3), dtype=bool)
        assert dice_score(z, z) == 1.0

    def test_symmetry(self, rng):
        a, b = random_blob(rng), random_blob(rng)
        assert dice_score(a, b) == dice_score(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            dice_score(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))


class TestPrecisionRecall:
    def test_perfect_prediction(self, rng):
        m = random_blob(rng)
        assert precision_recall(m, m.copy()) == (1.0, 1.0)

    def test_superset_prediction(self):
        gt = np.zeros((4, 4, 4), dtype=bool)
        gt[1, 1, 1] = gt[1, 1, 2] = True
        pred = gt.copy()
        pred[2, 2, 2] = pred[2, 2, 3] = True
        p, r = precision_recall(pred, gt)
        assert r == 1.0
        assert p == 2 / 4

    def test_counting_oracle(self, rng):
        pred, gt = random_blob(rng), random_blob(rng)
        p, r = precision_recall(pred, gt)
        tp = fp = fn = 0
        for z in range(pred.shape[0]):
            for y in range(pred.shape[1]):
                for x in range(pred.shape[2]):
                    if pred[z, y, x] and gt[z, y, x]:
                        tp += 1
                    elif pred[z, y, x]:
                        fp += 1
                    elif gt[z, y, x]:
                        fn += 1
        assert p == tp / (tp + fp)
        assert r == tp / (tp + fn)

    def test_empty_conventions(self):
        z = np.zeros((3, 3, 3), dtype=bool)
        m = z.copy()
        m[1, 1, 1] = True
        assert precision_recall(z, z) == (1.0, 1.0)
        assert precision_recall(z, m) == (0.0, 0.0)  # empty pred, non-empty gt
        assert precision_recall(m, z) == (0.0, 0.0)  # non-empty pred, empty gt

    def test_precision_recall_duality(self, rng):
        for _ in range(5):
            a, b = random_blob(rng), random_blob(rng)
            pa, ra = precision_recall(a, b)
            pb, rb = precision_recall(b, a)
            assert pa == rb and ra == pb


class TestHd95:
    def test_identical_masks_zero(self, rng):
        m = random_blob(rng)
        assert hd95(m, m.copy()) == 0.0

    def test_two_voxels_three_apart(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[2, 2, 2] = True
        b[2, 2, 5] = True
        assert hd95(a, b, spacing=(1.0, 1.0, 1.0)) == 3.0

    def test_empty_mask_sentinel(self, rng):
        m = random_blob(rng)
        z = np.zeros_like(m)
        assert math.isnan(hd95(m, z))
        assert math.isnan(hd95(z, m))

    def test_matches_allpairs_oracle(self, rng):
        for trial in range(6):
            a = random_blob(rng, shape=(10, 10, 10))
            b = random_blob(rng, shape=(10, 10, 10))
            if not a.any() or not b.any():
                continue
            spacing = (1.0, 1.0, 1.0) if trial % 2 == 0 else (2.0, 0.7, 0.7)
            got = hd95(a, b, spacing)
            ref = oracles.allpairs_hd95(a, b, spacing)
            assert abs(got - ref) < 1e-9, f"trial {trial}: {got} vs {ref}"

    def test_symmetry(self, rng):
        a, b = random_blob(rng), random_blob(rng)
        assert hd95(a, b) == hd95(b, a)

    def test_isotropic_spacing_linearity(self, rng):
        a, b = random_blob(rng), random_blob(rng)
        base = hd95(a, b, (1.0, 1.0, 1.0))
        scaled = hd95(a, b, (2.5, 2.5, 2.5))
        np.testing.assert_allclose(scaled, 2.5 * base, rtol=1e-12)

    def test_surface_extraction_against_loop_oracle(self, rng):
        m = random_blob(rng, shape=(9, 9, 9))
        got = sorted(map(tuple, np.argwhere(metrics.surface_voxels(m))))
        ref = sorted(oracles.allpairs_surface(m))
        assert got == ref


class TestPercentile:
    def test_inclusive_range(self):
        assert percentile(np.arange(101, dtype=float), 95.0) == 95.0

    def test_single_element(self):
        for q in (0.0, 37.5, 100.0):
            assert percentile([4.25], q) == 4.25

    def test_matches_interpolation_oracle(self, rng):
        for _ in range(10):
            vals = rng.uniform(-10, 10, int(rng.integers(2, 40)))
            q = float(rng.uniform(0, 100))
            assert abs(percentile(vals, q) - oracles.interp_percentile(vals, q)) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            percentile([], 50.0)


class TestWilcoxon:
    def test_perfectly_antisymmetric_gives_p_one(self):
        d = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0]
        _, p = wilcoxon_signed_rank(d)
        assert p == 1.0

    def test_all_positive_n8(self):
        d = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]
        w, p = wilcoxon_signed_rank(d)
        assert w == 36.0
        assert p == 2.0 / 2 ** 8 == 0.0078125

    def test_exact_matches_enumeration_n6(self, rng):
        d = rng.normal(0.3, 1.0, 6)
        w, p = wilcoxon_signed_rank(d)
        w_ref, p_ref = oracles.enumerate_wilcoxon(d)
        assert w == w_ref
        assert p == p_ref

    @pytest.mark.parametrize("n", [5, 6, 7, 8, 9, 10])
    def test_exact_sweep_matches_enumeration(self, n):
        rng = np.random.default_rng(100 + n)
        for trial in range(4):
            d = rng.normal(0.4 if trial % 2 else 0.0, 1.0, n)
            if trial == 3:  # force midrank ties
                d = np.round(d * 2) / 2.0
                d[d == 0] = 0.25
            w, p = wilcoxon_signed_rank(d)
            w_ref, p_ref = oracles.enumerate_wilcoxon(d)
            assert w == w_ref
            assert p == p_ref, f"n={n} trial={trial}: {p} vs {p_ref}"

    def test_zero_diffs_dropped(self):
        d = [0.0, 0.0, 1.0, 2.0, -0.5, 3.0, 1.5]
        w, p = wilcoxon_signed_rank(d)
        w_ref, p_ref = oracles.enumerate_wilcoxon([1.0, 2.0, -0.5, 3.0, 1.5])
        assert (w, p) == (w_ref, p_ref)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            wilcoxon_signed_rank([0.0, 0.0, 0.0])

    def test_too_few_rejected(self):
        with pytest.raises(ValueError, match="at least 5"):
            wilcoxon_signed_rank([1.0, 2.0, 3.0, 0.0])

    def test_normal_approximation_branch(self, rng):
        d = rng.normal(0.5, 1.0, 40)
        w, p = wilcoxon_signed_rank(d)
        assert 0.0 <= p <= 1.0
        # large positive shift should be significant
        assert p < 0.05

    def test_normal_approximation_agrees_with_scipy(self, rng):
        from scipy.stats import wilcoxon as scipy_wilcoxon
        d = rng.normal(0.3, 1.0, 30)
        _, p = wilcoxon_signed_rank(d)
        ref = scipy_wilcoxon(d, correction=False, mode="approx").pvalue
        np.testing.assert_allclose(p, ref, rtol=1e-10)


class TestCsvSurface:
    def _records(self):
        return [
            MetricsRecord("case_0002", 0.75, 2.0, 0.8, 0.7),
            MetricsRecord("case_0000", 0.5, float("nan"), 0.6, 0.4),
            MetricsRecord("case_0001", 1.0, 0.0, 1.0, 1.0),
        ]

    def test_rows_sorted_and_aggregated(self, tmp_path):
        path = tmp_path / "metrics.csv"
        metrics.write_metrics_csv(path, self._records())
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "case,dice,hd95,precision,recall"
        assert [l.split(",")[0] for l in lines[1:4]] == ["case_0000", "case_0001", "case_0002"]
        assert lines[4].startswith("mean,")
        assert lines[5].startswith("median,")
        assert lines[6].startswith("# hd95 aggregated over 2/3")
        mean_cols = lines[4].split(",")
        assert float(mean_cols[1]) == pytest.approx(0.75)   # dice mean
        assert float(mean_cols[2]) == pytest.approx(1.0)    # hd95 mean over valid only

    def test_byte_identical_rewrites(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        metrics.write_metrics_csv(p1, self._records())
        metrics.write_metrics_csv(p2, list(reversed(self._records())))
        assert p1.read_bytes() == p2.read_bytes()

    def test_aggregate_empty_rejected(self):
        with pytest.raises(ValueError, match="no metric records"):
            metrics.aggregate([])
