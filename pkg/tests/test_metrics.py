import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldflow.metrics import (MAP50, MAP5095, MatchResult, UndefinedAPError,
                               average_precision, boundary_iou, evaluate_label_rasters,
                               evaluate_tiles, map_at, mask_iou, match_predictions, pr_curve,
                               size_histogram, size_stats)

from oracles import mean_ap, random_case


def box(shape, y0, x0, h, w):
    m = np.zeros(shape, bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return m


def ranked(flags, n_gt):
    n = len(flags)
    return MatchResult(np.array(flags, bool), np.full(n, -1), np.zeros(n),
                       np.linspace(1.0, 0.1, n) if n else np.zeros(0), n_gt, 0.5)


class TestIoU:
    def test_identity_and_disjoint(self):
        a = box((6, 6), 0, 0, 3, 3)
        assert mask_iou(a, a) == 1.0
        assert mask_iou(a, box((6, 6), 3, 3, 3, 3)) == 0.0
        assert mask_iou(np.zeros((2, 2)), np.zeros((2, 2))) == 0.0

    def test_two_of_six(self):
        a = box((4, 4), 0, 0, 2, 2)
        b = box((4, 4), 0, 1, 2, 2)
        assert mask_iou(a, b) == pytest.approx(2 / 6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mask_iou(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_boundary_shift(self):
        p = box((6, 8), 1, 1, 4, 4)
        g = box((6, 8), 1, 2, 4, 4)
        assert boundary_iou(p, g, 0) == pytest.approx(1 / 3, abs=1e-15)
        assert mask_iou(p, g) == pytest.approx(0.6, abs=1e-15)

    def test_boundary_identity_and_disjoint(self):
        a = box((10, 10), 1, 1, 3, 3)
        assert boundary_iou(a, a) == 1.0
        assert boundary_iou(a, box((10, 10), 6, 6, 3, 3), 0) == 0.0

    def test_grid_edge_counts_as_outside(self):
        full = np.ones((3, 3), bool)
        assert boundary_iou(full, box((3, 3), 0, 0, 3, 3), 0) == 1.0
        centre = box((3, 3), 1, 1, 1, 1)
        assert boundary_iou(full, centre, 0) == 0.0

    def test_negative_thickness(self):
        with pytest.raises(ValueError):
            boundary_iou(np.ones((2, 2)), np.ones((2, 2)), -1)


class TestMatching:
    def test_exact(self):
        g = box((5, 5), 0, 0, 3, 3)
        m = match_predictions([g], [0.9], [g], 0.5)
        assert (m.n_tp, m.n_fp, m.n_fn) == (1, 0, 0)

    def test_duplicate_lower_score_is_fp(self):
        g = box((10, 10), 0, 0, 10, 10)
        p1 = box((10, 10), 0, 0, 9, 10)
        p2 = box((10, 10), 0, 0, 8, 10)
        m = match_predictions([p2, p1], [0.7, 0.9], [g], 0.5)
        assert m.tp.tolist() == [False, True]
        assert m.iou[1] == pytest.approx(0.9)

    def test_below_threshold(self):
        g = box((10, 10), 0, 0, 10, 10)
        m = match_predictions([box((10, 10), 0, 0, 4, 10)], [0.5], [g], 0.5)
        assert (m.n_tp, m.n_fp, m.n_fn) == (0, 1, 1)

    def test_tied_scores_rank_by_position(self):
        g = box((4, 4), 0, 0, 4, 4)
        m = match_predictions([box((4, 4), 0, 0, 3, 4), g], [0.5, 0.5], [g], 0.5)
        assert m.tp.tolist() == [True, False]

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            match_predictions([], [], [], 0.0)


class TestAP:
    def test_single_tp(self):
        assert average_precision(ranked([True], 1)) == 1.0

    def test_tp_then_fp(self):
        m = ranked([True, False], 2)
        c = pr_curve(m)
        assert c.recall.tolist() == [0.0, 0.5, 0.5]
        assert c.precision.tolist() == [1.0, 1.0, 0.5]
        assert average_precision(m) == 0.5

    def test_fp_then_tp(self):
        m = ranked([False, True], 1)
        assert pr_curve(m).precision.tolist() == [1.0, 0.0, 0.5]
        assert average_precision(m) == 0.5

    def test_no_predictions(self):
        assert average_precision(ranked([], 3)) == 0.0
        assert average_precision(ranked([], 3), "coco101") == 0.0

    def test_undefined_without_gt(self):
        with pytest.raises(UndefinedAPError):
            average_precision(ranked([False], 0))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            average_precision(ranked([True], 1), "voc11")

    def test_iou_072_sweep(self):
        g = box((5, 5), 0, 0, 5, 5)
        p = g.copy()
        p.ravel()[18:] = False
        assert mask_iou(p, g) == pytest.approx(0.72)
        assert map_at([p], [0.8], [g], MAP5095) == 0.5
        assert map_at([p], [0.8], [g], MAP50) == 1.0

    def test_perfect(self):
        gts = [box((8, 8), 0, 0, 4, 4), box((8, 8), 4, 4, 4, 4)]
        assert map_at(gts, [0.3, 0.6], gts) == 1.0
        assert map_at(gts, [0.3, 0.6], gts, mode="coco101") == 1.0

    def test_thresholds_are_exact_decimals(self):
        assert MAP5095 == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    @pytest.mark.parametrize("mode", ["all_point", "coco101"])
    def test_oracle_sample(self, mode):
        for seed in range(60):
            p, s, g = random_case(seed)
            assert map_at(p, s, g, MAP5095, mode) == pytest.approx(
                float(mean_ap(p, s, g, MAP5095, mode)), abs=1e-12)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
    def test_properties(self, seed, scale):
        p, s, g = random_case(seed)
        aps = [map_at(p, s, g, (t,)) for t in MAP5095]
        assert all(0.0 <= a <= 1.0 for a in aps)
        assert all(a >= b - 1e-15 for a, b in zip(aps, aps[1:]))
        assert map_at(p, s, g, MAP5095) <= map_at(p, s, g, MAP50) + 1e-15
        scaled = [v * scale for v in s]
        for t in (0.5, 0.75):
            a = match_predictions(p, s, g, t)
            b = match_predictions(p, scaled, g, t)
            assert np.array_equal(a.tp, b.tp) and np.array_equal(a.matched_gt, b.matched_gt)
        assert map_at(p, scaled, g) == map_at(p, s, g)


class TestReports:
    def test_label_rasters(self):
        gt = np.zeros((10, 10), np.uint32)
        gt[:5] = 1
        gt[5:] = 2
        pred = gt.copy()
        pred[5:] = 0
        r = evaluate_label_rasters(pred, gt)
        assert r["map50"] == 0.5 and r["n_gt"] == 2 and r["n_pred"] == 1
        assert [row["tp"] for row in r["per_threshold"]] == [1] * 10

    def test_tiles_pool_empty_gt(self):
        g = box((4, 4), 0, 0, 2, 2)
        r = evaluate_tiles([([g], [0.9], [g]), ([g], [0.95], [])])
        assert r["n_pred"] == 2 and r["n_gt"] == 1
        assert r["map50"] == 0.5

    def test_matches_tile_by_tile(self):
        cases = [random_case(s, 16, 4) for s in range(5)]
        r = evaluate_tiles(cases, MAP50)
        assert r["per_threshold"][0]["tp"] == sum(
            match_predictions(p, s, g, 0.5).n_tp for p, s, g in cases)


class TestSizes:
    def test_decade_bins(self):
        counts = size_histogram([0.3, 2, 15, 3000])
        assert counts.tolist() == [0, 1, 1, 1, 0, 1]

    def test_half_open_bins(self):
        assert size_histogram([1.0, 10.0], [1, 10, 100]).tolist() == [1, 1]
        assert size_histogram([0.5, 100.0], [1, 10, 100]).tolist() == [0, 0]

    def test_bad_edges(self):
        with pytest.raises(ValueError):
            size_histogram([1], [1, 1, 2])

    def test_stats(self):
        s = size_stats([0.1, 0.25, 0.3, 5])
        assert s["total_fields"] == 4 and s["fields_above_floor"] == 2
        assert s["total_area_ha"] == pytest.approx(5.65)
