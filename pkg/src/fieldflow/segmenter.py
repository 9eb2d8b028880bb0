"""Per-tile instance mask providers and the prediction wire format.

Masks travel as column-major run-length counts (COCO convention): the first
count is the number of leading zeros, then runs alternate between ones and
zeros.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .raster import TilePlan, Window


class PredictionValidationError(ValueError):
    """A prediction violates the wire-format invariants."""

    def __init__(self, message: str, tile_index: Optional[int] = None,
                 instance_index: Optional[int] = None):
        where = []
        if tile_index is not None:
            where.append(f"tile {tile_index}")
        if instance_index is not None:
            where.append(f"instance {instance_index}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.tile_index = tile_index
        self.instance_index = instance_index


class TileError(RuntimeError):
    """A provider could not produce predictions for one tile."""

    def __init__(self, tile_index: int, message: str):
        super().__init__(f"tile {tile_index}: {message}")
        self.tile_index = tile_index


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return counts


def rle_decode(counts: Sequence[int], h: int, w: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise PredictionValidationError("negative run length")
    if int(counts.sum()) != h * w:
        raise PredictionValidationError(
            f"run lengths sum to {int(counts.sum())}, expected {h * w}")
    values = np.zeros(counts.size, dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((h, w), order="F")


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return (0, 0, 0, 0)
    cols = np.flatnonzero(mask.any(axis=0))
    return (int(cols[0]), int(rows[0]),
            int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def encode_crop(crop: np.ndarray, bx: int, by: int, h: int, w: int) -> list[int]:
    """RLE of an ``h`` x ``w`` tile that is empty outside ``crop`` placed at (bx, by)."""
    bh, bw = crop.shape
    if bh == 0 or bw == 0 or not crop.any():
        return [h * w]
    cols = np.zeros((h, bw), dtype=bool)
    cols[by:by + bh] = crop
    counts = rle_encode(cols)
    counts[0] += bx * h
    trailing = (w - bx - bw) * h
    if trailing:
        if len(counts) % 2 == 1:
            counts[-1] += trailing
        else:
            counts.append(trailing)
    return counts


@dataclass(eq=False)
class InstancePrediction:
    tile_window: Window
    rle: list[int]
    bbox: tuple[int, int, int, int]
    score: float
    area_px: int
    _crop: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_mask(cls, window: Window, mask: np.ndarray, score: float) -> "InstancePrediction":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (window.h, window.w):
            raise PredictionValidationError(
                f"mask shape {mask.shape} does not match window {window.h}x{window.w}")
        bbox = tight_bbox(mask)
        bx, by, bw, bh = bbox
        crop = mask[by:by + bh, bx:bx + bw].copy()
        return cls(window, encode_crop(crop, bx, by, window.h, window.w), bbox,
                   float(score), int(crop.sum()), crop)

    @classmethod
    def from_crop(cls, window: Window, crop: np.ndarray, bx: int, by: int,
                  score: float) -> "InstancePrediction":
        """Build from a tight crop whose top-left sits at tile pixel (bx, by)."""
        crop = np.asarray(crop, dtype=bool)
        bh, bw = crop.shape
        return cls(window, encode_crop(crop, bx, by, window.h, window.w),
                   (int(bx), int(by), int(bw), int(bh)) if crop.any() else (0, 0, 0, 0),
                   float(score), int(crop.sum()), crop if crop.any() else None)

    @property
    def mask(self) -> np.ndarray:
        """Decoded tile-local mask."""
        if self._crop is None:
            return rle_decode(self.rle, self.tile_window.h, self.tile_window.w)
        out = np.zeros((self.tile_window.h, self.tile_window.w), dtype=bool)
        bx, by, bw, bh = self.bbox
        out[by:by + bh, bx:bx + bw] = self._crop
        return out

    @property
    def crop(self) -> np.ndarray:
        """The mask restricted to its bounding box (cached)."""
        if self._crop is None:
            bx, by, bw, bh = self.bbox
            self._crop = self.mask[by:by + bh, bx:bx + bw].copy()
        return self._crop

    def validate(self, tile_index: Optional[int] = None,
                 instance_index: Optional[int] = None) -> None:
        def fail(msg):
            raise PredictionValidationError(msg, tile_index, instance_index)

        if not (0.0 <= self.score <= 1.0):
            fail(f"score {self.score} outside [0, 1]")
        try:
            mask = rle_decode(self.rle, self.tile_window.h, self.tile_window.w)
        except PredictionValidationError as exc:
            fail(str(exc))
        if len(self.rle) > 1 and any(c == 0 for c in self.rle[1:]):
            fail("zero-length run after the leading run")
        area = int(mask.sum())
        if area != self.area_px:
            fail(f"area_px {self.area_px} but mask has {area} pixels")
        box = tight_bbox(mask)
        if tuple(self.bbox) != box:
            fail(f"bbox {list(self.bbox)} is not the tight box {list(box)}")
        bx, by, bw, bh = box
        self._crop = mask[by:by + bh, bx:bx + bw].copy()

    def to_dict(self) -> dict:
        return {"rle": [int(c) for c in self.rle], "bbox": [int(v) for v in self.bbox],
                "score": float(self.score), "area_px": int(self.area_px)}


@dataclass(eq=False)
class PredictionSet:
    tile_index: int
    window: Window
    predictions: list[InstancePrediction]

    def __len__(self) -> int:
        return len(self.predictions)


class MaskProvider(Protocol):
    """Anything that returns the instance masks found in one tile."""

    def predict(self, tile_index: int, window: Window,
                pixels: Optional[np.ndarray]) -> list[InstancePrediction]: ...


def segment_tile(provider: MaskProvider, plan: TilePlan, tile_index: int,
                 pixels: Optional[np.ndarray] = None) -> PredictionSet:
    """Run a provider on one tile.

    Every instance the provider returns is kept, in provider order; no score
    threshold is applied anywhere downstream either.
    """
    window = plan[tile_index]
    if pixels is not None and pixels.shape[:2] != (window.h, window.w):
        raise TileError(tile_index, f"pixel block {pixels.shape[:2]} does not match window")
    try:
        preds = list(provider.predict(tile_index, window, pixels))
    except TileError:
        raise
    except Exception as exc:  # provider bugs and I/O failures become tile failures
        raise TileError(tile_index, f"{type(exc).__name__}: {exc}") from exc
    for p in preds:
        if p.tile_window != window:
            raise TileError(tile_index, "provider returned a prediction for another window")
    return PredictionSet(tile_index, window, preds)


def predictions_to_dict(sets: Iterable[PredictionSet], tile_size: int, overlap: int) -> dict:
    return {
        "tile_size": int(tile_size),
        "overlap": int(overlap),
        "tiles": [
            {"tile_index": s.tile_index, "window": s.window.to_dict(),
             "instances": [p.to_dict() for p in s.predictions]}
            for s in sorted(sets, key=lambda s: s.tile_index)
        ],
    }


def dump_predictions(sets: Iterable[PredictionSet], path: str | Path,
                     tile_size: int, overlap: int) -> None:
    doc = predictions_to_dict(sets, tile_size, overlap)
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def parse_predictions(doc: dict) -> tuple[list[PredictionSet], int, int]:
    """Validate a decoded prediction document; returns (sets, tile_size, overlap)."""
    try:
        tile_size, overlap = int(doc["tile_size"]), int(doc["overlap"])
        tiles = doc["tiles"]
    except (KeyError, TypeError, ValueError) as exc:
        raise PredictionValidationError(f"malformed prediction document: {exc}") from exc
    sets = []
    seen = set()
    for t in tiles:
        try:
            ti = int(t["tile_index"])
            wd = t["window"]
            win = Window(int(wd["x0"]), int(wd["y0"]), int(wd["w"]), int(wd["h"]))
            raw = t["instances"]
        except (KeyError, TypeError, ValueError) as exc:
            raise PredictionValidationError(f"malformed tile entry: {exc}") from exc
        if ti in seen:
            raise PredictionValidationError("duplicate tile entry", ti)
        seen.add(ti)
        preds = []
        for j, inst in enumerate(raw):
            try:
                p = InstancePrediction(win, [int(c) for c in inst["rle"]],
                                       tuple(int(v) for v in inst["bbox"]),
                                       float(inst["score"]), int(inst["area_px"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise PredictionValidationError(f"malformed instance: {exc}", ti, j) from exc
            if len(p.bbox) != 4:
                raise PredictionValidationError("bbox must have 4 values", ti, j)
            p.validate(ti, j)
            preds.append(p)
        sets.append(PredictionSet(ti, win, preds))
    sets.sort(key=lambda s: s.tile_index)
    return sets, tile_size, overlap


def load_predictions(path: str | Path) -> list[PredictionSet]:
    sets, _, _ = load_prediction_file(path)
    return sets


def load_prediction_file(path: str | Path) -> tuple[list[PredictionSet], int, int]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PredictionValidationError(f"{path}: not valid JSON ({exc})") from exc
    return parse_predictions(doc)


class FilePredictionProvider:
    """Serves predictions recorded in a prediction file (read-only)."""

    def __init__(self, sets: Sequence[PredictionSet], tile_size: int, overlap: int):
        self.tile_size = tile_size
        self.overlap = overlap
        self._by_tile = {s.tile_index: s for s in sets}

    @classmethod
    def from_file(cls, path: str | Path) -> "FilePredictionProvider":
        return cls(*load_prediction_file(path))

    def check_plan(self, plan: TilePlan) -> None:
        if (self.tile_size, self.overlap) != (plan.tile_size, plan.overlap):
            raise PredictionValidationError(
                f"prediction file was made for tile_size={self.tile_size}, "
                f"overlap={self.overlap}; run uses {plan.tile_size}/{plan.overlap}")
        for ti, s in self._by_tile.items():
            if ti < 0 or ti >= len(plan) or plan[ti] != s.window:
                raise PredictionValidationError("window does not match the tile plan", ti)

    def predict(self, tile_index, window, pixels=None):
        s = self._by_tile.get(tile_index)
        if s is None:
            raise TileError(tile_index, "no predictions recorded for this tile")
        if s.window != window:
            raise TileError(tile_index, "recorded window does not match the tile plan")
        return list(s.predictions)
