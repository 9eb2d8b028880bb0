import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldflow.raster import GeoTransform, Window
from fieldflow.refine import FieldInstance, order_by_area
from fieldflow.unify import (FieldLabelRaster, MergeParams, compact_labels, mosaic,
                             overlap_scores, remove_small_labels, resolve_overlaps)

GT = GeoTransform(0.0, 400.0, 10.0, 10.0)


def place(mask_full, tile=0, index=0, window=None, score=0.8):
    """FieldInstance from a full-extent boolean mask."""
    m = np.asarray(mask_full, bool)
    rows = np.flatnonzero(m.any(1))
    cols = np.flatnonzero(m.any(0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    win = window or Window(0, 0, m.shape[1], m.shape[0])
    return FieldInstance(m[r0:r1, c0:c1].copy(), int(c0), int(r0), score, tile, index, (win,))


def full(inst, shape):
    out = np.zeros(shape, bool)
    x0, y0, x1, y1 = inst.bounds
    out[y0:y1, x0:x1] = inst.mask
    return out


def blank(shape=(30, 30)):
    return np.zeros(shape, bool)


class TestResolve:
    def test_high_iou_merges_to_union(self):
        a = blank()
        a[0:10, 0:10] = True
        b = a.copy()
        b[0, 0:8] = False
        b[10, 0:3] = True
        assert (a.sum(), b.sum()) == (100, 95)
        A, B = place(a, index=0), place(b, index=1)
        iou = overlap_scores(A, B)[0]
        assert iou == pytest.approx(92 / 103)
        out = resolve_overlaps([A, B])
        assert len(out) == 1
        assert np.array_equal(full(out[0], a.shape), a | b)
        assert out[0].n_merged == 2

    def test_disjoint_kept(self):
        a, b = blank(), blank()
        a[0:5, 0:5] = True
        b[10:15, 10:15] = True
        assert len(resolve_overlaps([place(a), place(b, index=1)])) == 2

    def test_containment_fires(self):
        a, b = blank(), blank()
        a[0:10, 0:10] = True
        b[0:4, 0:10] = True
        A, B = place(a), place(b, index=1)
        iou, contain, _ = overlap_scores(A, B)
        assert iou == pytest.approx(0.4) and contain == 1.0
        out = resolve_overlaps([A, B])
        assert len(out) == 1 and out[0].area_px == 100

    def test_below_thresholds_both_survive(self):
        a, b = blank(), blank()
        a[0:10, 0:10] = True
        b[0:10, 9:19] = True
        assert len(resolve_overlaps([place(a), place(b, index=1)])) == 2

    def test_seam_split_field_rejoins(self):
        # a 20x12 field seen by two tiles that each cover half of it
        field = blank((20, 40))
        field[4:16, 5:35] = True
        w1, w2 = Window(0, 0, 22, 20), Window(18, 0, 22, 20)
        left = field.copy()
        left[:, 22:] = False
        right = field.copy()
        right[:, :18] = False
        A = place(left, 0, 0, w1)
        B = place(right, 1, 0, w2)
        iou, contain, seam = overlap_scores(A, B)
        assert iou < 0.5 and contain < 0.8 and seam == 1.0
        out = resolve_overlaps(order_by_area([A, B]))
        assert len(out) == 1 and np.array_equal(full(out[0], field.shape), field)

    def test_thresholds_validated(self):
        with pytest.raises(ValueError):
            MergeParams(iou_threshold=0.0)
        with pytest.raises(ValueError):
            MergeParams(containment_threshold=1.2)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_idempotent_and_order_free(self, seed):
        rng = np.random.default_rng(seed)
        insts = []
        for k in range(rng.integers(1, 12)):
            m = blank((40, 40))
            x, y = rng.integers(0, 30, 2)
            w, h = rng.integers(2, 12, 2)
            m[y:y + h, x:x + w] = True
            insts.append(place(m, tile=int(rng.integers(0, 3)), index=k))
        once = resolve_overlaps(order_by_area(insts))
        twice = resolve_overlaps(once)
        assert len(once) == len(twice)
        for a, b in zip(once, twice):
            assert a.bounds == b.bounds and np.array_equal(a.mask, b.mask)
        shuffled = insts[:]
        random.Random(seed).shuffle(shuffled)
        again = resolve_overlaps(order_by_area(shuffled))
        assert [(i.bounds, i.mask.tobytes()) for i in again] == \
               [(i.bounds, i.mask.tobytes()) for i in once]
        r = mosaic(once, (40, 40), GT)
        assert sum(r.id_areas.values()) <= sum(i.area_px for i in insts)
        assert sum(r.id_areas.values()) == int(np.count_nonzero(r.labels))


class TestMosaic:
    def test_disjoint(self):
        a, b = blank(), blank()
        a[0:5, 0:5] = True
        b[10:14, 10:14] = True
        r = mosaic([place(a), place(b, index=1)], (30, 30), GT)
        assert r.id_areas == {1: 25, 2: 16}
        assert set(np.unique(r.labels)) == {0, 1, 2}

    def test_first_writer_wins(self):
        a, b = blank(), blank()
        a[0:10, 0:10] = True
        b[0:10, 9:19] = True
        r = mosaic([place(a), place(b, index=1)], (30, 30), GT)
        assert r.id_areas == {1: 100, 2: 90}

    def test_split_keeps_largest_fragment(self):
        a, b = blank(), blank()
        a[0:10, 5:7] = True
        b[2:5, 0:12] = True
        r = mosaic([place(a), place(b, index=1)], (30, 30), GT)
        # b is cut by a into 15 px (left) and 15 px (right): tie goes to the first piece
        assert r.id_areas[2] == 15
        assert r.labels[3, 0] == 2 and r.labels[3, 11] == 0

    def test_empty(self):
        r = mosaic([], (5, 4), GT)
        assert r.labels.shape == (4, 5) and not r.labels.any() and r.id_areas == {}

    def test_extent_mismatch(self):
        a = blank()
        a[0:5, 0:5] = True
        with pytest.raises(ValueError):
            mosaic([place(a)], (3, 3), GT)


class TestSmallLabels:
    def raster(self):
        lab = np.zeros((10, 10), np.uint32)
        lab[0:5, 0:6] = 1
        lab[8, 0:3] = 2
        lab[6:10, 5:10] = 3
        return FieldLabelRaster.from_labels(lab, GT)

    def test_clears_small_without_renumbering(self):
        r = remove_small_labels(self.raster(), 25)
        assert r.id_areas == {1: 30}
        r = remove_small_labels(self.raster(), 10)
        assert sorted(r.id_areas) == [1, 3] and r.labels[8, 0] == 0

    def test_unchanged_when_all_large(self):
        r = self.raster()
        assert remove_small_labels(r, 3) is r

    def test_all_zero(self):
        r = FieldLabelRaster.from_labels(np.zeros((3, 3), np.uint32), GT)
        assert remove_small_labels(r, 25).id_areas == {}

    def test_compaction(self):
        r = compact_labels(remove_small_labels(self.raster(), 10))
        assert r.id_areas == {1: 30, 2: 20}
        assert r.labels[9, 9] == 2 and r.next_id == 3
