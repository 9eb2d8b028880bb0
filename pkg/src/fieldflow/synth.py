"""Synthetic field landscapes and a noisy stand-in for the segmentation model.

Random numbers come from a small documented generator so that any
implementation can replay a landscape bit for bit:

* ``splitmix64(x)``: x += 0x9E3779B97F4A7C15; z = x;
  z = (z ^ z>>30) * 0xBF58476D1CE4E5B9; z = (z ^ z>>27) * 0x94D049BB133111EB;
  return z ^ z>>31 (all mod 2**64).
* The stream state starts at ``splitmix64(seed)`` and advances as
  state = state * 6364136223846793005 + 1442695040888963407 (mod 2**64).
  ``uniform()`` returns (state >> 11) / 2**53 of the advanced state.

Landscape recipe, in draw order:

1. Sites. Minimum spacing d = 0.5 * sqrt(width * height / n_sites). For each
   site, draw up to 1000 candidates (x = floor(u * width), y = floor(u * height),
   x drawn first); the first candidate at Euclidean distance >= d from every
   earlier site is taken, or the last candidate if none qualifies.
2. Drops. One draw per site in site order; the cell is non-field when
   u < non_field_fraction.
3. Every pixel joins the Voronoi cell of its nearest site. A pixel whose right
   or lower neighbour lies in a different cell becomes a 1-px boundary line.
4. Surviving cells are numbered 1..K in row-major order of their site (y, then
   x). Each label keeps only its largest 4-connected piece.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .raster import GeoGrid, GeoTransform, TilePlan, Window, square
from .refine import STRUCT_4, largest_component
from .segmenter import InstancePrediction, PredictionSet
from .unify import FieldLabelRaster

MASK64 = (1 << 64) - 1
SITE_ATTEMPTS = 1000
SCORE_RANGE = (0.5, 1.0)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def substream_seed(seed: int, key: int) -> int:
    """Independent seed for a numbered sub-stream (e.g. one per tile)."""
    return splitmix64((seed & MASK64) ^ splitmix64(key & MASK64))


class Rng:
    def __init__(self, seed: int):
        self.state = splitmix64(seed & MASK64)

    def next_u64(self) -> int:
        self.state = (self.state * 6364136223846793005 + 1442695040888963407) & MASK64
        return self.state

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


@dataclass(eq=False)
class SyntheticLandscape:
    label_raster: FieldLabelRaster
    seed: int
    params: dict
    sites: np.ndarray
    dropped: np.ndarray
    _gt_polygons: Optional[list] = field(default=None, repr=False)

    @property
    def labels(self) -> np.ndarray:
        return self.label_raster.labels

    @property
    def n_fields(self) -> int:
        return len(self.label_raster.id_areas)

    @property
    def gt_polygons(self):
        if self._gt_polygons is None:
            from .vectorize import trace_polygons
            self._gt_polygons = trace_polygons(self.label_raster)
        return self._gt_polygons


def _place_sites(rng: Rng, width: int, height: int, n_sites: int) -> np.ndarray:
    d2 = 0.25 * width * height / n_sites
    cell = max(1, int(math.sqrt(d2)))
    grid: dict[tuple[int, int], list[tuple[int, int]]] = {}
    sites = []
    reach = 1 + int(math.sqrt(d2) // cell)
    for _ in range(n_sites):
        for _attempt in range(SITE_ATTEMPTS):
            x = int(rng.uniform() * width)
            y = int(rng.uniform() * height)
            gx, gy = x // cell, y // cell
            ok = True
            for cy in range(gy - reach, gy + reach + 1):
                for cx in range(gx - reach, gx + reach + 1):
                    for sx, sy in grid.get((cx, cy), ()):
                        if (sx - x) ** 2 + (sy - y) ** 2 < d2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                break
        sites.append((x, y))
        grid.setdefault((x // cell, y // cell), []).append((x, y))
    return np.array(sites, dtype=np.int64).reshape(-1, 2)


def voronoi_cells(sites: np.ndarray, width: int, height: int) -> np.ndarray:
    """Index of the nearest site for every pixel (int32, height x width)."""
    seeds = np.full((height, width), -1, dtype=np.int32)
    # later duplicates never occur once spacing holds; first site wins otherwise
    for i in range(len(sites) - 1, -1, -1):
        seeds[sites[i, 1], sites[i, 0]] = i
    if len(sites) == 1:
        return np.zeros((height, width), dtype=np.int32)
    idx = ndimage.distance_transform_edt(seeds < 0, return_distances=False,
                                         return_indices=True)
    return seeds[idx[0], idx[1]]


def cell_boundaries(cells: np.ndarray, border_px: int = 1) -> np.ndarray:
    border = np.zeros(cells.shape, dtype=bool)
    if border_px <= 0:
        return border
    border[:, :-1] |= cells[:, :-1] != cells[:, 1:]
    border[:-1, :] |= cells[:-1, :] != cells[1:, :]
    if border_px > 1:
        border = ndimage.binary_dilation(border, structure=square(border_px - 1))
    return border


def generate_landscape(seed: int, width: int, height: int, n_sites: int,
                       non_field_fraction: float = 0.0,
                       geotransform: Optional[GeoTransform] = None,
                       border_px: int = 1) -> SyntheticLandscape:
    """Voronoi parcels separated by thin boundary lines (see module docstring)."""
    if n_sites < 1:
        raise ValueError("n_sites must be >= 1")
    if not 0.0 <= non_field_fraction < 1.0:
        raise ValueError("non_field_fraction must be in [0, 1)")
    gt = geotransform or GeoTransform(0.0, float(height) * 10.0, 10.0, 10.0, 0)
    rng = Rng(seed)
    sites = _place_sites(rng, width, height, n_sites)
    dropped = np.array([rng.uniform() < non_field_fraction for _ in range(n_sites)], dtype=bool)
    cells = voronoi_cells(sites, width, height)
    border = cell_boundaries(cells, border_px)
    order = sorted(range(n_sites), key=lambda i: (sites[i, 1], sites[i, 0], i))
    lut = np.zeros(n_sites, dtype=np.uint32)
    k = 0
    for i in order:
        if not dropped[i]:
            k += 1
            lut[i] = k
    labels = lut[cells]
    labels[border] = 0
    del cells
    if k:
        for lab, sl in enumerate(ndimage.find_objects(labels, max_label=k), start=1):
            if sl is None:
                continue
            sub = labels[sl]
            own = sub == lab
            keep = largest_component(own, 4)
            sub[own & ~keep] = 0
        present = np.flatnonzero(np.bincount(labels.ravel(), minlength=k + 1)[1:]) + 1
        if present.size != k:
            # cells swallowed entirely by boundary lines: renumber to stay contiguous
            remap = np.zeros(k + 1, dtype=np.uint32)
            remap[present] = np.arange(1, present.size + 1, dtype=np.uint32)
            labels = remap[labels]
    params = {"width": width, "height": height, "n_sites": n_sites,
              "non_field_fraction": non_field_fraction, "border_px": border_px,
              "resolution_m": gt.resolution}
    raster = FieldLabelRaster.from_labels(labels, gt)
    return SyntheticLandscape(raster, seed, params, sites, dropped)


def landscape_from_labels(labels: np.ndarray, gt: Optional[GeoTransform] = None,
                          seed: int = 0) -> SyntheticLandscape:
    """Wrap a hand-made label raster so the oracle can run on it."""
    labels = np.asarray(labels, dtype=np.uint32)
    h, w = labels.shape
    gt = gt or GeoTransform(0.0, float(h) * 10.0, 10.0, 10.0, 0)
    raster = FieldLabelRaster.from_labels(labels, gt)
    params = {"width": w, "height": h, "resolution_m": gt.resolution}
    return SyntheticLandscape(raster, seed, params, np.zeros((0, 2), np.int64),
                              np.zeros(0, bool))


def render_image(landscape: SyntheticLandscape) -> GeoGrid:
    """A single-band u8 stand-in for imagery: one flat tone per field."""
    labels = landscape.labels
    tones = (np.arange(int(labels.max()) + 1, dtype=np.uint64) * 2654435761 % 151 + 80)
    tones[0] = 20
    return GeoGrid(tones.astype(np.uint8)[labels], landscape.label_raster.geotransform, "u8")


def _adjacent_pairs(sub: np.ndarray, reach: int = 2) -> list[tuple[int, int]]:
    """Label pairs within Chebyshev distance ``reach`` of each other."""
    h, w = sub.shape
    pairs = set()
    for dy in range(0, reach + 1):
        for dx in range(-reach, reach + 1):
            if dy == 0 and dx <= 0:
                continue
            if dx >= 0:
                a = sub[0:h - dy, 0:w - dx]
                b = sub[dy:h, dx:w]
            else:
                a = sub[0:h - dy, -dx:w]
                b = sub[dy:h, 0:w + dx]
            m = (a != b) & (a > 0) & (b > 0)
            if m.any():
                lo = np.minimum(a[m], b[m]).astype(np.int64)
                hi = np.maximum(a[m], b[m]).astype(np.int64)
                pairs.update(zip(*np.unique(np.stack([lo, hi]), axis=1).tolist()))
    return sorted(pairs)


def _bridge(ma: np.ndarray, mb: np.ndarray) -> Optional[tuple[int, int]]:
    both = ma | mb
    da = ndimage.binary_dilation(ma, structure=STRUCT_4)
    db = ndimage.binary_dilation(mb, structure=STRUCT_4)
    cand = da & db & ~both
    if not cand.any():
        da = ndimage.binary_dilation(ma, structure=square(1))
        db = ndimage.binary_dilation(mb, structure=square(1))
        cand = da & db & ~both
    if not cand.any():
        return None
    r, c = np.unravel_index(int(np.flatnonzero(cand)[0]), cand.shape)
    return int(r), int(c)


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _jitter(mask: np.ndarray, rng: Rng, jitter_px: int) -> np.ndarray:
    u = rng.uniform()
    if jitter_px <= 0:
        return mask
    if u < 1.0 / 3.0:
        return ndimage.binary_erosion(mask, structure=STRUCT_4, iterations=jitter_px,
                                      border_value=1)
    if u < 2.0 / 3.0:
        return ndimage.binary_dilation(mask, structure=STRUCT_4, iterations=jitter_px)
    return mask


def oracle_tile(landscape: SyntheticLandscape, window: Window, tile_index: int,
                merge_prob: float = 0.0, drop_prob: float = 0.0, jitter_px: int = 0,
                seed: int = 0) -> list[InstancePrediction]:
    """Predictions for one tile.

    Draw order on the tile's sub-stream: one drop draw per field present (id
    order), one merge draw per adjacent pair (sorted pairs), then per output
    instance a jitter draw and a score draw.
    """
    rng = Rng(substream_seed(seed, tile_index))
    sub = np.ascontiguousarray(landscape.labels[window.slices])
    n = int(sub.max()) if sub.size else 0
    if n == 0:
        return []
    objs = ndimage.find_objects(sub, max_label=n)
    ids = [i for i, sl in enumerate(objs, start=1) if sl is not None]
    kept = [i for i in ids if not (rng.uniform() < drop_prob)]
    groups = {i: [i] for i in kept}
    bridges: list[tuple[int, int]] = []
    if merge_prob > 0 and kept:
        keep_set = set(kept)
        uf = _UnionFind(kept)
        for a, b in _adjacent_pairs(sub):
            u = rng.uniform()
            if u < merge_prob and a in keep_set and b in keep_set:
                uf.union(a, b)
                bridges.append((a, b))
        groups = {}
        for i in kept:
            groups.setdefault(uf.find(i), []).append(i)
    out = []
    for root in sorted(groups):
        members = groups[root]
        if len(members) == 1:
            sl = objs[root - 1]
            crop = sub[sl] == root
            y0, x0 = sl[0].start, sl[1].start
            if jitter_px > 0:
                pad = jitter_px
                ys = slice(max(0, y0 - pad), min(window.h, sl[0].stop + pad))
                xs = slice(max(0, x0 - pad), min(window.w, sl[1].stop + pad))
                crop = sub[ys, xs] == root
                y0, x0 = ys.start, xs.start
        else:
            mset = set(members)
            crop = np.isin(sub, members)
            for a, b in bridges:
                if a in mset:
                    pt = _bridge(sub == a, sub == b)
                    if pt is not None:
                        crop[pt] = True
            y0 = x0 = 0
        crop = _jitter(crop, rng, jitter_px)
        score = SCORE_RANGE[0] + (SCORE_RANGE[1] - SCORE_RANGE[0]) * rng.uniform()
        rows = np.flatnonzero(crop.any(axis=1))
        if rows.size == 0:
            continue
        cols = np.flatnonzero(crop.any(axis=0))
        tight = crop[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        out.append(InstancePrediction.from_crop(window, tight, x0 + int(cols[0]),
                                                y0 + int(rows[0]), score))
    return out


def perturb_oracle(landscape: SyntheticLandscape, tile_plan: TilePlan,
                   merge_prob: float = 0.0, drop_prob: float = 0.0, jitter_px: int = 0,
                   seed: int = 0) -> list[PredictionSet]:
    """Clipped ground truth per tile, optionally dropped, merged and jittered."""
    for name, p in (("merge_prob", merge_prob), ("drop_prob", drop_prob)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0, 1]")
    if jitter_px < 0:
        raise ValueError("jitter_px must be >= 0")
    return [PredictionSet(i, win, oracle_tile(landscape, win, i, merge_prob, drop_prob,
                                              jitter_px, seed))
            for i, win in enumerate(tile_plan.tiles)]


class OracleProvider:
    """``MaskProvider`` backed by a synthetic landscape."""

    def __init__(self, landscape: SyntheticLandscape, merge_prob: float = 0.0,
                 drop_prob: float = 0.0, jitter_px: int = 0, seed: int = 0):
        self.landscape = landscape
        self.merge_prob = merge_prob
        self.drop_prob = drop_prob
        self.jitter_px = jitter_px
        self.seed = seed

    def predict(self, tile_index, window, pixels=None):
        return oracle_tile(self.landscape, window, tile_index, self.merge_prob,
                           self.drop_prob, self.jitter_px, self.seed)
