"""Cross-tile unification: duplicate merging, mosaicking and artifact removal."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .raster import GeoGrid, GeoTransform, Window
from .refine import FieldInstance, largest_component

INDEX_CELL = 256


@dataclass(frozen=True)
class MergeParams:
    """Thresholds for treating two detections as the same field.

    ``seam_iou_threshold`` compares two instances only over the pixels both
    of their tile windows observed, which is how the same field looks when
    two tiles each see a different part of it.
    """

    iou_threshold: float = 0.5
    containment_threshold: float = 0.8
    seam_iou_threshold: float = 0.5
    min_mosaic_area_px: int = 1

    def __post_init__(self):
        for name in ("iou_threshold", "containment_threshold", "seam_iou_threshold"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.min_mosaic_area_px < 1:
            raise ValueError("min_mosaic_area_px must be >= 1")


@dataclass(eq=False)
class FieldLabelRaster:
    grid: GeoGrid
    next_id: int
    id_areas: dict[int, int]
    attrs: dict[int, dict] = field(default_factory=dict)

    @property
    def labels(self) -> np.ndarray:
        return self.grid.values

    @property
    def geotransform(self) -> GeoTransform:
        return self.grid.geotransform

    @classmethod
    def from_labels(cls, labels: np.ndarray, gt: GeoTransform,
                    attrs: Optional[dict[int, dict]] = None) -> "FieldLabelRaster":
        labels = np.asarray(labels, dtype=np.uint32)
        counts = np.bincount(labels.ravel())
        ids = np.flatnonzero(counts)
        id_areas = {int(i): int(counts[i]) for i in ids if i != 0}
        return cls(GeoGrid(labels, gt, "u32"), int(counts.size), id_areas, dict(attrs or {}))


def _overlap_count(a: FieldInstance, b: FieldInstance) -> int:
    ax0, ay0, ax1, ay1 = a.bounds
    bx0, by0, bx1, by1 = b.bounds
    x0, y0, x1, y1 = max(ax0, bx0), max(ay0, by0), min(ax1, bx1), min(ay1, by1)
    if x1 <= x0 or y1 <= y0:
        return 0
    sa = a.mask[y0 - ay0:y1 - ay0, x0 - ax0:x1 - ax0]
    sb = b.mask[y0 - by0:y1 - by0, x0 - bx0:x1 - bx0]
    return int(np.count_nonzero(sa & sb))


def _count_inside(inst: FieldInstance, windows: Sequence[Window]) -> int:
    """Pixels of ``inst`` lying in the union of ``windows``."""
    h, w = inst.mask.shape
    cover = np.zeros((h, w), dtype=bool)
    box = Window(inst.x0, inst.y0, w, h)
    for win in windows:
        iw = box.intersection(win)
        if iw is not None:
            cover[iw.y0 - inst.y0:iw.y1 - inst.y0, iw.x0 - inst.x0:iw.x1 - inst.x0] = True
    return int(np.count_nonzero(inst.mask & cover))


def overlap_scores(a: FieldInstance, b: FieldInstance) -> tuple[float, float, float]:
    """(IoU, intersection over smaller area, IoU within the jointly observed area)."""
    inter = _overlap_count(a, b)
    if inter == 0:
        return 0.0, 0.0, 0.0
    na, nb = a.area_px, b.area_px
    iou = inter / (na + nb - inter)
    contain = inter / min(na, nb)
    if set(a.windows) == set(b.windows):
        return iou, contain, iou
    sa = _count_inside(a, b.windows)
    sb = _count_inside(b, a.windows)
    seam = inter / (sa + sb - inter)
    return iou, contain, seam


def should_merge(a: FieldInstance, b: FieldInstance, params: MergeParams) -> bool:
    iou, contain, seam = overlap_scores(a, b)
    return (iou >= params.iou_threshold or contain >= params.containment_threshold
            or seam >= params.seam_iou_threshold)


def union(a: FieldInstance, b: FieldInstance) -> FieldInstance:
    """``a`` absorbs ``b``; identity (tile/index) stays with ``a``."""
    ax0, ay0, ax1, ay1 = a.bounds
    bx0, by0, bx1, by1 = b.bounds
    x0, y0, x1, y1 = min(ax0, bx0), min(ay0, by0), max(ax1, bx1), max(ay1, by1)
    m = np.zeros((y1 - y0, x1 - x0), dtype=bool)
    m[ay0 - y0:ay1 - y0, ax0 - x0:ax1 - x0] |= a.mask
    m[by0 - y0:by1 - y0, bx0 - x0:bx1 - x0] |= b.mask
    windows = tuple(dict.fromkeys(a.windows + b.windows))
    na, nb = a.area_px, b.area_px
    frac = (a.valid_fraction * na + b.valid_fraction * nb) / (na + nb) if na + nb else 1.0
    return a.with_mask(m, x0, y0, score=max(a.score, b.score), windows=windows,
                       n_merged=a.n_merged + b.n_merged, valid_fraction=frac)


class _GridIndex:
    def __init__(self, cell: int = INDEX_CELL):
        self.cell = cell
        self.cells: dict[tuple[int, int], list[int]] = defaultdict(list)

    def _keys(self, bounds):
        x0, y0, x1, y1 = bounds
        c = self.cell
        for cy in range(y0 // c, (y1 - 1) // c + 1):
            for cx in range(x0 // c, (x1 - 1) // c + 1):
                yield cx, cy

    def add(self, pos: int, bounds) -> None:
        for k in self._keys(bounds):
            bucket = self.cells[k]
            if not bucket or bucket[-1] != pos:
                bucket.append(pos)

    def query(self, bounds) -> list[int]:
        out = set()
        for k in self._keys(bounds):
            out.update(self.cells.get(k, ()))
        return sorted(out)


def _boxes_touch(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def _merge_pass(instances: Sequence[FieldInstance], params: MergeParams):
    kept: list[FieldInstance] = []
    index = _GridIndex()
    changed = False
    for inst in instances:
        if inst.area_px == 0:
            continue
        target = None
        for pos in index.query(inst.bounds):
            if _boxes_touch(kept[pos].bounds, inst.bounds) and should_merge(kept[pos], inst, params):
                target = pos
                break
        if target is None:
            index.add(len(kept), inst.bounds)
            kept.append(inst)
        else:
            kept[target] = union(kept[target], inst)
            index.add(target, kept[target].bounds)
            changed = True
    return kept, changed


def resolve_overlaps(instances: Sequence[FieldInstance],
                     params: MergeParams = MergeParams()) -> list[FieldInstance]:
    """Fold duplicate detections into the earliest retained instance.

    ``instances`` must already be in priority order. The scan repeats until a
    pass merges nothing, so running it again on the result is a no-op.
    """
    kept, changed = _merge_pass(instances, params)
    while changed:
        kept, changed = _merge_pass(kept, params)
    return kept


def mosaic(instances: Sequence[FieldInstance], extent: tuple[int, int],
           gt: GeoTransform, connectivity: int = 4) -> FieldLabelRaster:
    """Paint instances in priority order; earlier owners keep contested pixels.

    A field cut into pieces by earlier owners keeps only its largest piece.
    """
    width, height = extent
    labels = np.zeros((height, width), dtype=np.uint32)
    attrs = {}
    for fid, inst in enumerate(instances, start=1):
        x0, y0, x1, y1 = inst.bounds
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            raise ValueError(
                f"instance {fid} spans {inst.bounds}, outside the {width}x{height} extent")
        region = labels[y0:y1, x0:x1]
        region[inst.mask & (region == 0)] = fid
        attrs[fid] = {"score": float(inst.score), "n_merged": int(inst.n_merged),
                      "valid_fraction": float(inst.valid_fraction)}
    n = len(instances)
    if n:
        for fid, sl in enumerate(ndimage.find_objects(labels, max_label=n), start=1):
            if sl is None:
                continue
            sub = labels[sl]
            own = sub == fid
            keep = largest_component(own, connectivity)
            drop = own & ~keep
            if drop.any():
                sub[drop] = 0
    raster = FieldLabelRaster.from_labels(labels, gt)
    raster.next_id = n + 1
    raster.attrs = {k: v for k, v in attrs.items() if k in raster.id_areas}
    return raster


def remove_small_labels(raster: FieldLabelRaster, min_area_px: int) -> FieldLabelRaster:
    """Clear labels smaller than ``min_area_px``; surviving ids keep their numbers."""
    if min_area_px < 1:
        raise ValueError("min_area_px must be >= 1")
    small = [i for i, a in raster.id_areas.items() if a < min_area_px]
    if not small:
        return raster
    lut = np.arange(max(raster.next_id, int(raster.labels.max()) + 1), dtype=np.uint32)
    lut[small] = 0
    labels = lut[raster.labels]
    areas = {i: a for i, a in raster.id_areas.items() if a >= min_area_px}
    attrs = {i: v for i, v in raster.attrs.items() if i in areas}
    return FieldLabelRaster(GeoGrid(labels, raster.geotransform, "u32"), raster.next_id,
                            areas, attrs)


def compact_labels(raster: FieldLabelRaster) -> FieldLabelRaster:
    """Renumber surviving ids to 1..N, preserving their order."""
    ids = sorted(raster.id_areas)
    if ids == list(range(1, len(ids) + 1)):
        return replace(raster, next_id=len(ids) + 1)
    lut = np.zeros(max(raster.next_id, int(raster.labels.max()) + 1), dtype=np.uint32)
    for new, old in enumerate(ids, start=1):
        lut[old] = new
    labels = lut[raster.labels]
    areas = {new: raster.id_areas[old] for new, old in enumerate(ids, start=1)}
    attrs = {new: raster.attrs[old] for new, old in enumerate(ids, start=1)
             if old in raster.attrs}
    return FieldLabelRaster(GeoGrid(labels, raster.geotransform, "u32"), len(ids) + 1,
                            areas, attrs)
