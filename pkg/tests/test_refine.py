import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from fieldflow.raster import GeoGrid, GeoTransform, MaskPair, Window, square
from fieldflow.refine import (COMPARISON_FLOOR_HA, STRUCT_4, FieldInstance, RefineParams,
                              largest_component, min_area_ha_for_resolution, min_area_px,
                              morphological_refine, order_by_area, refine_instance,
                              validity_filter)

GT10 = GeoTransform(0.0, 1000.0, 10.0, 10.0)


def inst(mask, x0=0, y0=0, tile=0, index=0, score=0.9):
    mask = np.asarray(mask, bool)
    win = Window(x0, y0, mask.shape[1], mask.shape[0])
    return FieldInstance(mask, x0, y0, score, tile, index, (win,))


def two_blocks():
    m = np.zeros((9, 15), bool)
    m[2:7, 1:6] = True
    m[4, 6:9] = True
    m[2:7, 9:14] = True
    return m


class TestMorphology:
    def test_square_survives(self):
        m = np.zeros((9, 9), bool)
        m[2:7, 2:7] = True
        assert np.array_equal(morphological_refine(m), m)

    def test_empty(self):
        m = np.zeros((6, 6), bool)
        assert not morphological_refine(m).any()

    def test_bridge_cut_left_block_kept(self):
        out = morphological_refine(two_blocks())
        expected = np.zeros((9, 15), bool)
        expected[2:7, 1:6] = True
        assert np.array_equal(out, expected)

    def test_thin_line_vanishes(self):
        m = np.zeros((5, 9), bool)
        m[2, 1:8] = True
        assert not morphological_refine(m).any()

    def test_tie_break_lowest_row_major(self):
        m = np.zeros((4, 7), bool)
        m[0, 5] = m[3, 1] = True
        assert np.argwhere(largest_component(m)).tolist() == [[0, 5]]

    def test_larger_block_wins(self):
        m = np.zeros((10, 16), bool)
        m[1:5, 1:5] = True
        m[4, 5:9] = True
        m[1:9, 8:15] = True
        out = morphological_refine(m)
        assert out[5, 10] and not out[2, 2]

    def test_params_validated(self):
        with pytest.raises(ValueError):
            RefineParams(kernel_radius=0)
        with pytest.raises(ValueError):
            RefineParams(connectivity=6)
        with pytest.raises(ValueError):
            RefineParams(min_valid_fraction=1.5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.3, 0.9), st.sampled_from([1, 2]),
           st.sampled_from([4, 8]))
    def test_properties(self, seed, density, radius, conn):
        rng = np.random.default_rng(seed)
        m = ndimage.binary_closing(rng.random((24, 24)) < density)
        p = RefineParams(kernel_radius=radius, connectivity=conn)
        out = morphological_refine(m, p)
        assert not np.any(out & ~ndimage.binary_dilation(m, square(radius)))
        assert ndimage.label(out, STRUCT_4)[1] <= 1
        assert np.array_equal(morphological_refine(out, p), out)
        if not m.any():
            assert not out.any()


class TestOrdering:
    def test_example(self):
        areas = [5, 9, 9, 2]
        items = []
        for k, a in enumerate(areas):
            m = np.zeros((1, 10), bool)
            m[0, :a] = True
            items.append(inst(m, index=k))
        assert [i.index for i in order_by_area(items)] == [1, 2, 0, 3]

    def test_tile_index_breaks_ties_first(self):
        a = inst(np.ones((2, 2)), tile=1, index=0)
        b = inst(np.ones((2, 2)), tile=0, index=5)
        assert order_by_area([a, b]) == [b, a]

    def test_trivial(self):
        assert order_by_area([]) == []
        one = inst(np.ones((1, 1)))
        assert order_by_area([one]) == [one]


class TestResolutionTable:
    @pytest.mark.parametrize("res,ha", [(10, 0.5), (5, 0.5), (3, 0.3), (2.5, 0.3),
                                        (2, 0.1), (0.5, 0.05)])
    def test_table(self, res, ha):
        assert min_area_ha_for_resolution(res) == ha

    def test_nearest(self):
        assert min_area_ha_for_resolution(30) == 0.5
        assert min_area_ha_for_resolution(0.3) == 0.05

    def test_floor_is_25_px(self):
        assert min_area_px(GT10, COMPARISON_FLOOR_HA) == 25
        assert min_area_px(GT10, 0.5) == 50


class TestValidity:
    def masks(self, quality, context=None):
        q = GeoGrid.from_bool(quality, GT10)
        c = GeoGrid.from_bool(quality if context is None else context, GT10)
        return MaskPair(q, c)

    def test_keep_inside_valid(self):
        d = validity_filter(inst(np.ones((10, 10))), self.masks(np.ones((20, 20), bool)),
                            RefineParams(min_area_px=25))
        assert d.keep and d.reason is None and d.valid_fraction == 1.0

    def test_half_on_context_excluded(self):
        ctx = np.ones((20, 20), bool)
        ctx[:, 5:] = False
        d = validity_filter(inst(np.ones((10, 10))), self.masks(np.ones((20, 20), bool), ctx),
                            RefineParams(min_valid_fraction=0.9))
        assert not d.keep and d.reason == "valid_fraction"
        assert d.valid_fraction == pytest.approx(0.5)

    def test_min_area_24_px(self):
        m = np.zeros((5, 5), bool)
        m.ravel()[:24] = True
        d = validity_filter(inst(m), None, RefineParams(min_area_px=min_area_px(GT10, 0.25)))
        assert not d.keep and d.reason == "min_area"

    def test_quality_clips_before_area_test(self):
        q = np.ones((20, 20), bool)
        q[:, 3:] = False
        d = validity_filter(inst(np.ones((10, 10)), 2, 2), self.masks(q),
                            RefineParams(min_area_px=5, min_valid_fraction=0.0))
        assert d.keep and d.instance.area_px == 10
        assert d.instance.bounds == (2, 2, 3, 12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_clipping_never_grows(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.random((16, 16)) > 0.3
        m = rng.random((8, 8)) > 0.4
        i = inst(m, 3, 4)
        d = validity_filter(i, self.masks(q), RefineParams(min_valid_fraction=0.0))
        assert d.instance.area_px <= i.area_px


def test_refine_instance_crops_to_result():
    i = inst(two_blocks(), 10, 20)
    r = refine_instance(i, RefineParams())
    assert r.bounds == (11, 22, 16, 27) and r.area_px == 25
    assert refine_instance(i, RefineParams(morphology=False)) is i
