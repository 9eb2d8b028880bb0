"""Per-instance refinement: area ordering, morphology and validity filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .raster import GeoTransform, MaskPair, Window, pixel_area_ha, square
from .segmenter import InstancePrediction

# (resolution in m, minimum reliable field area in ha), coarse to fine
RESOLUTION_MIN_AREA_HA = (
    (10.0, 0.5),
    (5.0, 0.5),
    (3.0, 0.3),
    (2.5, 0.3),
    (2.0, 0.1),
    (0.5, 0.05),
)

# smallest field size compared across products; 25 px at 10 m
COMPARISON_FLOOR_HA = 0.25

STRUCT_4 = ndimage.generate_binary_structure(2, 1)
STRUCT_8 = ndimage.generate_binary_structure(2, 2)


def min_area_ha_for_resolution(resolution_m: float) -> float:
    """Minimum field area for imagery of the given ground resolution.

    Uses the nearest tabulated resolution on a log scale; ties go to the
    coarser entry.
    """
    if resolution_m <= 0:
        raise ValueError("resolution must be positive")
    best = min(RESOLUTION_MIN_AREA_HA,
               key=lambda e: abs(math.log(resolution_m / e[0])))
    return best[1]


def min_area_px(gt: GeoTransform, area_ha: float) -> int:
    """Pixel count equivalent of ``area_ha`` (rounded up, at least 1)."""
    return max(1, math.ceil(area_ha / pixel_area_ha(gt) - 1e-9))


def structure_for(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return STRUCT_4
    if connectivity == 8:
        return STRUCT_8
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


@dataclass(frozen=True)
class RefineParams:
    kernel_radius: int = 1
    connectivity: int = 4
    min_valid_fraction: float = 0.9
    min_area_px: int = 1
    morphology: bool = True

    def __post_init__(self):
        if self.kernel_radius < 1:
            raise ValueError("kernel_radius must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if not 0.0 <= self.min_valid_fraction <= 1.0:
            raise ValueError("min_valid_fraction must be in [0, 1]")
        if self.min_area_px < 1:
            raise ValueError("min_area_px must be >= 1")


@dataclass(eq=False)
class FieldInstance:
    """A candidate field in global pixel coordinates.

    ``mask`` is a boolean crop whose top-left pixel sits at (``x0``, ``y0``)
    in the full raster. ``windows`` lists the tile windows that observed it.
    """

    mask: np.ndarray
    x0: int
    y0: int
    score: float
    tile_index: int
    index: int
    windows: tuple[Window, ...]
    n_merged: int = 1
    valid_fraction: float = 1.0
    _area: Optional[int] = field(default=None, repr=False)

    @classmethod
    def from_prediction(cls, pred: InstancePrediction, tile_index: int,
                        index: int) -> "FieldInstance":
        bx, by, _, _ = pred.bbox
        crop = pred.crop.copy()
        return cls(crop, pred.tile_window.x0 + bx, pred.tile_window.y0 + by,
                   pred.score, tile_index, index, (pred.tile_window,))

    @property
    def area_px(self) -> int:
        if self._area is None:
            self._area = int(np.count_nonzero(self.mask))
        return self._area

    @property
    def bounds(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1), exclusive upper corner."""
        h, w = self.mask.shape
        return self.x0, self.y0, self.x0 + w, self.y0 + h

    def with_mask(self, mask: np.ndarray, x0: Optional[int] = None,
                  y0: Optional[int] = None, **changes) -> "FieldInstance":
        return replace(self, mask=mask, x0=self.x0 if x0 is None else x0,
                       y0=self.y0 if y0 is None else y0, _area=None, **changes)

    def cropped(self) -> "FieldInstance":
        """Shrink the crop to the tight bounding box of the mask."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        if rows.size == 0:
            return self.with_mask(np.zeros((0, 0), dtype=bool))
        cols = np.flatnonzero(self.mask.any(axis=0))
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        if (r0, c0) == (0, 0) and (r1, c1) == self.mask.shape:
            return self
        return self.with_mask(self.mask[r0:r1, c0:c1], self.x0 + int(c0), self.y0 + int(r0))


def order_by_area(instances: Sequence[FieldInstance]) -> list[FieldInstance]:
    """Largest first; ties by tile index then instance index."""
    return sorted(instances, key=lambda i: (-i.area_px, i.tile_index, i.index))


def largest_component(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Keep only the biggest connected region.

    Equal-size regions are resolved toward the one holding the smallest
    row-major pixel index, which is the lowest ``ndimage.label`` id.
    """
    labels, n = ndimage.label(mask, structure=structure_for(connectivity))
    if n <= 1:
        return mask.astype(bool, copy=True)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def morphological_refine(mask: np.ndarray, params: RefineParams = RefineParams()) -> np.ndarray:
    """Erode, keep the largest component, dilate back.

    Single-pixel bridges between fields vanish under the erosion, so a mask
    that spans two fields collapses onto the larger one.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    se = square(params.kernel_radius)
    core = ndimage.binary_erosion(mask, structure=se, border_value=0)
    if not core.any():
        return np.zeros_like(mask)
    core = largest_component(core, params.connectivity)
    return ndimage.binary_dilation(core, structure=se)


def refine_instance(inst: FieldInstance, params: RefineParams) -> FieldInstance:
    if not params.morphology:
        return inst
    return inst.with_mask(morphological_refine(inst.mask, params)).cropped()


@dataclass(frozen=True)
class ValidityDecision:
    keep: bool
    reason: Optional[str]
    instance: FieldInstance
    valid_fraction: float


def validity_filter(inst: FieldInstance, masks: Optional[MaskPair],
                    params: RefineParams) -> ValidityDecision:
    """Clip by the quality mask, then test area and context-valid fraction."""
    if masks is None:
        clipped, frac = inst, 1.0
    else:
        h, w = inst.mask.shape
        sl = (slice(inst.y0, inst.y0 + h), slice(inst.x0, inst.x0 + w))
        quality = masks.quality.values[sl].astype(bool)
        context = masks.context.values[sl].astype(bool)
        if quality.shape != inst.mask.shape:
            raise ValueError("instance extends beyond the mask extent")
        m = inst.mask & quality
        clipped = inst.with_mask(m) if not np.array_equal(m, inst.mask) else inst
        area = clipped.area_px
        frac = float(np.count_nonzero(m & context)) / area if area else 0.0
    clipped = clipped.cropped()
    result = replace(clipped, valid_fraction=frac)
    if clipped.area_px < params.min_area_px:
        return ValidityDecision(False, "min_area", result, frac)
    if frac < params.min_valid_fraction:
        return ValidityDecision(False, "valid_fraction", result, frac)
    return ValidityDecision(True, None, result, frac)
