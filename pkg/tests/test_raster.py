import json

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from fieldflow.raster import (ConfigurationError, GeoGrid, GeoTransform, MaskPair, Window,
                              build_context_mask, build_tile_plan, pixel_area_ha,
                              read_bundle, write_bundle)


def starts(plan, axis):
    return sorted({(w.x0 if axis == "x" else w.y0) for w in plan})


class TestTilePlan:
    def test_single_tile(self):
        plan = build_tile_plan(512, 512, 512, 128)
        assert plan.tiles == (Window(0, 0, 512, 512),)

    def test_clamped_grid(self):
        plan = build_tile_plan(1024, 1024, 512, 128)
        assert len(plan) == 9
        assert starts(plan, "x") == [0, 384, 512]
        assert starts(plan, "y") == [0, 384, 512]

    def test_clamp_last_start(self):
        plan = build_tile_plan(600, 512, 512, 128)
        assert [(w.x0, w.y0) for w in plan] == [(0, 0), (88, 0)]

    def test_small_extent_gives_full_dimension_tile(self):
        plan = build_tile_plan(100, 40, 512, 128)
        assert plan.tiles == (Window(0, 0, 100, 40),)

    @pytest.mark.parametrize("tile,overlap", [(128, 128), (64, 100), (64, -1)])
    def test_bad_overlap(self, tile, overlap):
        with pytest.raises(ConfigurationError):
            build_tile_plan(256, 256, tile, overlap)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 300), st.integers(1, 300), st.integers(2, 80), st.data())
    def test_coverage_and_bounds(self, w, h, tile, data):
        overlap = data.draw(st.integers(0, tile - 1))
        plan = build_tile_plan(w, h, tile, overlap)
        cover = np.zeros((h, w), dtype=np.int32)
        for win in plan:
            assert win.x0 >= 0 and win.y0 >= 0 and win.x1 <= w and win.y1 <= h
            assert (win.w, win.h) == (min(tile, w), min(tile, h))
            cover[win.slices] += 1
        assert cover.min() >= 1
        keys = [(t.y0, t.x0) for t in plan]
        assert keys == sorted(keys) and len(set(keys)) == len(keys)
        assert build_tile_plan(w, h, tile, overlap) == plan


class TestGeoTransform:
    def test_pixel_area(self):
        assert pixel_area_ha(GeoTransform(0, 0, 10, 10)) == pytest.approx(0.01)
        assert pixel_area_ha(GeoTransform(0, 0, 100, 100)) == pytest.approx(1.0)
        assert pixel_area_ha(GeoTransform(0, 0, 2.5, 2.5)) == pytest.approx(0.000625)
        assert round(0.25 / pixel_area_ha(GeoTransform(0, 0, 10, 10))) == 25

    def test_rejects_nonpositive_pixels(self):
        with pytest.raises(ConfigurationError):
            GeoTransform(0, 0, 0, 10)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-1e7, 1e7), st.floats(-1e7, 1e7),
           st.sampled_from([0.3, 0.5, 2.5, 3.0, 10.0, 29.97, 100.0]),
           st.integers(0, 100000), st.integers(0, 100000))
    @example(0.0, 8388609.0, 0.3, 0, 1)
    def test_integer_round_trip(self, ox, oy, px, col, row):
        gt = GeoTransform(ox, oy, px, px)
        x, y = gt.to_world(col, row)
        assert gt.to_pixel(x, y) == (col, row)


class TestContextMask:
    def gt(self):
        return GeoTransform(0, 90, 10, 10)

    def test_all_valid_stays_valid(self):
        q = GeoGrid.from_bool(np.ones((9, 9), bool), self.gt())
        assert build_context_mask(q, 2).as_bool().all()

    def test_radius_zero_is_identity(self):
        m = np.random.default_rng(0).random((9, 9)) > 0.3
        q = GeoGrid.from_bool(m, self.gt())
        assert np.array_equal(build_context_mask(q, 0).as_bool(), m)

    def test_center_pixel_grows_to_3x3(self):
        m = np.ones((9, 9), bool)
        m[4, 4] = False
        out = build_context_mask(GeoGrid.from_bool(m, self.gt()), 1).as_bool()
        expected = np.ones((9, 9), bool)
        expected[3:6, 3:6] = False
        assert np.array_equal(out, expected)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 5))
    def test_context_subset_of_quality(self, seed, r):
        m = np.random.default_rng(seed).random((20, 17)) > 0.2
        q = GeoGrid.from_bool(m, self.gt())
        c = build_context_mask(q, r)
        assert not np.any(c.as_bool() & ~m)
        MaskPair(q, c)

    def test_maskpair_rejects_context_outside_quality(self):
        q = GeoGrid.from_bool(np.zeros((3, 3), bool), self.gt())
        c = GeoGrid.from_bool(np.ones((3, 3), bool), self.gt())
        with pytest.raises(ConfigurationError):
            MaskPair(q, c)


class TestBundle:
    @pytest.mark.parametrize("dtype", ["u8", "u16", "u32", "f32"])
    def test_round_trip(self, tmp_path, dtype):
        rng = np.random.default_rng(1)
        vals = (rng.random((7, 5)) * 200).astype(np.float32)
        gt = GeoTransform(500000.0, 5400000.0, 10.0, 10.0, 32636)
        grid = GeoGrid(vals, gt, dtype, nodata=0)
        write_bundle(grid, tmp_path / "img")
        meta = json.loads((tmp_path / "img.json").read_text())
        assert meta["width"] == 5 and meta["height"] == 7 and meta["crs_epsg"] == 32636
        assert set(meta["geotransform"]) == {"origin_x", "origin_y", "pixel_size_x", "pixel_size_y"}
        back = read_bundle(tmp_path / "img")
        assert back.dtype == dtype and back.geotransform == gt and back.nodata == 0
        assert np.array_equal(back.values, grid.values)
        assert (tmp_path / "img.bin").stat().st_size == 35 * back.values.itemsize

    def test_little_endian_layout(self, tmp_path):
        grid = GeoGrid(np.array([[1, 256]], dtype=np.uint16), GeoTransform(0, 1, 1, 1), "u16")
        write_bundle(grid, tmp_path / "g")
        assert (tmp_path / "g.bin").read_bytes() == b"\x01\x00\x00\x01"

    def test_size_mismatch(self, tmp_path):
        grid = GeoGrid(np.zeros((2, 2), np.uint8), GeoTransform(0, 2, 1, 1))
        write_bundle(grid, tmp_path / "g")
        (tmp_path / "g.bin").write_bytes(b"\x00" * 3)
        with pytest.raises(ValueError):
            read_bundle(tmp_path / "g")

    def test_grid_is_read_only_without_freezing_caller(self):
        arr = np.zeros((2, 2), np.uint8)
        grid = GeoGrid(arr, GeoTransform(0, 2, 1, 1))
        with pytest.raises(ValueError):
            grid.values[0, 0] = 1
        arr[0, 0] = 1
