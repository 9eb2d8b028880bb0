"""Raster data model, geotransforms, quality/context masks and tile planning."""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

DTYPES = {"u8": np.uint8, "u16": np.uint16, "u32": np.uint32, "f32": np.float32}

DEFAULT_TILE_SIZE = 512
DEFAULT_OVERLAP = 128
DEFAULT_EXPAND_RADIUS = 8


class ConfigurationError(ValueError):
    """Raised for parameter combinations that cannot describe a valid run."""


def _snap(v: float, scale: float = 0.0) -> float:
    """Round ``v`` to an integer when it is within float noise of one.

    ``scale`` is the magnitude (in pixels) of the world values that produced
    ``v``; their rounding error grows with it, far from the origin.
    """
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(v)) + 8 * sys.float_info.epsilon * scale:
        return float(r)
    return v


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine mapping between pixel corners and world coordinates."""

    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float
    crs_epsg: int = 0

    def __post_init__(self):
        if not (self.pixel_size_x > 0 and self.pixel_size_y > 0):
            raise ConfigurationError("pixel sizes must be positive")

    def to_world(self, col: float, row: float) -> tuple[float, float]:
        return (self.origin_x + col * self.pixel_size_x,
                self.origin_y - row * self.pixel_size_y)

    def to_pixel(self, x: float, y: float) -> tuple[float, float]:
        # snapping makes the integer round trip exact
        col = (x - self.origin_x) / self.pixel_size_x
        row = (self.origin_y - y) / self.pixel_size_y
        return (_snap(col, (abs(x) + abs(self.origin_x)) / self.pixel_size_x),
                _snap(row, (abs(y) + abs(self.origin_y)) / self.pixel_size_y))

    @property
    def resolution(self) -> float:
        return max(self.pixel_size_x, self.pixel_size_y)

    def to_dict(self) -> dict:
        return {"origin_x": self.origin_x, "origin_y": self.origin_y,
                "pixel_size_x": self.pixel_size_x, "pixel_size_y": self.pixel_size_y}


def pixel_area_ha(gt: GeoTransform) -> float:
    """Ground area of one pixel in hectares."""
    return gt.pixel_size_x * gt.pixel_size_y / 10000.0


@dataclass(frozen=True, eq=False)
class GeoGrid:
    values: np.ndarray
    geotransform: GeoTransform
    dtype: str = "u8"
    nodata: Optional[float] = None

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")
        if self.values.ndim != 2:
            raise ConfigurationError("values must be a 2D array")
        arr = np.ascontiguousarray(self.values, dtype=DTYPES[self.dtype])
        if arr is self.values:
            arr = arr.view()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_bool(cls, mask: np.ndarray, gt: GeoTransform) -> "GeoGrid":
        return cls(np.asarray(mask, dtype=np.uint8), gt, "u8")

    def as_bool(self) -> np.ndarray:
        return self.values.astype(bool)

    def window(self, win: "Window") -> np.ndarray:
        return self.values[win.y0:win.y0 + win.h, win.x0:win.x0 + win.w]


def write_bundle(grid: GeoGrid, base: str | Path) -> None:
    """Write ``<base>.bin`` (row-major little-endian) and ``<base>.json``."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    le = grid.values.astype(np.dtype(DTYPES[grid.dtype]).newbyteorder("<"), copy=False)
    base.with_suffix(".bin").write_bytes(le.tobytes(order="C"))
    meta = {
        "width": grid.width,
        "height": grid.height,
        "dtype": grid.dtype,
        "crs_epsg": grid.geotransform.crs_epsg,
        "geotransform": grid.geotransform.to_dict(),
        "nodata": grid.nodata,
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_bundle(base: str | Path) -> GeoGrid:
    base = Path(base)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    meta = json.loads(base.with_suffix(".json").read_text())
    dtype = meta["dtype"]
    if dtype not in DTYPES:
        raise ValueError(f"{base}: unsupported dtype {dtype!r}")
    raw = np.fromfile(base.with_suffix(".bin"),
                      dtype=np.dtype(DTYPES[dtype]).newbyteorder("<"))
    w, h = int(meta["width"]), int(meta["height"])
    if raw.size != w * h:
        raise ValueError(f"{base}: expected {w * h} values, found {raw.size}")
    g = meta["geotransform"]
    gt = GeoTransform(g["origin_x"], g["origin_y"], g["pixel_size_x"], g["pixel_size_y"],
                      int(meta.get("crs_epsg") or 0))
    return GeoGrid(raw.reshape(h, w).astype(DTYPES[dtype]), gt, dtype, meta.get("nodata"))


@dataclass(frozen=True)
class Window:
    x0: int
    y0: int
    w: int
    h: int

    @property
    def x1(self) -> int:
        return self.x0 + self.w

    @property
    def y1(self) -> int:
        return self.y0 + self.h

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def intersection(self, other: "Window") -> Optional["Window"]:
        x0, y0 = max(self.x0, other.x0), max(self.y0, other.y0)
        x1, y1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if x1 <= x0 or y1 <= y0:
            return None
        return Window(x0, y0, x1 - x0, y1 - y0)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "w": self.w, "h": self.h}


@dataclass(frozen=True)
class TilePlan:
    tiles: tuple[Window, ...]
    tile_size: int
    overlap: int
    extent: tuple[int, int]

    def __len__(self) -> int:
        return len(self.tiles)

    def __iter__(self):
        return iter(self.tiles)

    def __getitem__(self, i: int) -> Window:
        return self.tiles[i]


def _starts(extent: int, tile: int, stride: int) -> list[int]:
    if extent <= tile:
        return [0]
    out = []
    s = 0
    while True:
        out.append(min(s, extent - tile))
        if s + tile >= extent:
            break
        s += stride
    return sorted(set(out))


def build_tile_plan(width: int, height: int, tile_size: int = DEFAULT_TILE_SIZE,
                    overlap: int = DEFAULT_OVERLAP) -> TilePlan:
    """Cover a ``width`` x ``height`` extent with overlapping square windows.

    Tiles advance by ``tile_size - overlap``; the last tile on each axis is
    clamped back inside the extent instead of being padded.
    """
    if width < 1 or height < 1:
        raise ConfigurationError("extent must be at least 1x1")
    if overlap < 0 or tile_size <= overlap:
        raise ConfigurationError(
            f"tile_size ({tile_size}) must exceed overlap ({overlap}) >= 0")
    stride = tile_size - overlap
    tw, th = min(tile_size, width), min(tile_size, height)
    xs = _starts(width, tile_size, stride)
    ys = _starts(height, tile_size, stride)
    tiles = tuple(Window(x, y, tw, th) for y in ys for x in xs)
    return TilePlan(tiles, tile_size, overlap, (width, height))


@dataclass(frozen=True, eq=False)
class MaskPair:
    quality: GeoGrid
    context: GeoGrid

    def __post_init__(self):
        q, c = self.quality.as_bool(), self.context.as_bool()
        if q.shape != c.shape:
            raise ConfigurationError("quality and context masks differ in shape")
        if np.any(c & ~q):
            raise ConfigurationError("context mask must be a subset of the quality mask")

    @classmethod
    def all_valid(cls, width: int, height: int, gt: GeoTransform) -> "MaskPair":
        ones = np.ones((height, width), dtype=np.uint8)
        return cls(GeoGrid(ones, gt), GeoGrid(ones, gt))


def square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def build_context_mask(quality: GeoGrid, expand_radius: int = DEFAULT_EXPAND_RADIUS) -> GeoGrid:
    """Grow the quality-mask exclusions by a square of half-width ``expand_radius``."""
    if expand_radius < 0:
        raise ConfigurationError("expand_radius must be >= 0")
    valid = quality.as_bool()
    if expand_radius == 0 or valid.all():
        return GeoGrid.from_bool(valid, quality.geotransform)
    excluded = ndimage.binary_dilation(~valid, structure=square(expand_radius))
    return GeoGrid.from_bool(valid & ~excluded, quality.geotransform)
