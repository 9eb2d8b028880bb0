"""Instance-level evaluation: IoU, boundary IoU, greedy matching, AP/mAP and
field-size statistics for a single "field" class."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .raster import square

MAP50 = (0.5,)
MAP5095 = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

DECADE_EDGES_HA = tuple(10.0 ** k for k in range(-2, 5))
SIZE_FLOOR_HA = 0.25

_STRUCT_4 = ndimage.generate_binary_structure(2, 1)


class UndefinedAPError(ValueError):
    """Average precision asked for with no ground truth to recall."""


def _check_shapes(p: np.ndarray, g: np.ndarray) -> None:
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    _check_shapes(p, g)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 0.0
    return np.count_nonzero(p & g) / union


def boundary_pixels(mask: np.ndarray, thickness: int = 0) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (the grid edge counts
    as outside), optionally widened by a square of half-width ``thickness``."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=_STRUCT_4, border_value=0)
    edge = m & ~inner
    if thickness > 0:
        edge = ndimage.binary_dilation(edge, structure=square(thickness))
    return edge


def boundary_iou(pred: np.ndarray, gt: np.ndarray, thickness: int = 1) -> float:
    if thickness < 0:
        raise ValueError("thickness must be >= 0")
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    _check_shapes(p, g)
    return mask_iou(boundary_pixels(p, thickness), boundary_pixels(g, thickness))


def iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    """Dense (n_pred, n_gt) IoU table."""
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    P = np.stack([np.asarray(p, dtype=bool).ravel() for p in preds]).astype(np.float64)
    G = np.stack([np.asarray(g, dtype=bool).ravel() for g in gts]).astype(np.float64)
    if P.shape[1] != G.shape[1]:
        raise ValueError("prediction and ground-truth grids differ in size")
    inter = P @ G.T
    union = P.sum(1)[:, None] + G.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def label_iou_table(pred_labels: np.ndarray, gt_labels: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, dict[int, list[tuple[int, float]]]]:
    """Sparse IoUs between every pair of labels in two label rasters.

    Returns (pred ids, gt ids, {pred position: [(gt position, iou), ...]}).
    Pairs that share no pixel are absent.
    """
    p = np.asarray(pred_labels).ravel().astype(np.int64)
    g = np.asarray(gt_labels).ravel().astype(np.int64)
    if p.shape != g.shape:
        raise ValueError("label rasters differ in size")
    pred_ids = np.unique(p[p > 0])
    gt_ids = np.unique(g[g > 0])
    p_area = np.bincount(p)
    g_area = np.bincount(g)
    both = (p > 0) & (g > 0)
    key = p[both] * (int(g.max()) + 1) + g[both]
    uk, cnt = np.unique(key, return_counts=True)
    pi = uk // (int(g.max()) + 1)
    gi = uk % (int(g.max()) + 1)
    ppos = {int(v): n for n, v in enumerate(pred_ids)}
    gpos = {int(v): n for n, v in enumerate(gt_ids)}
    table: dict[int, list[tuple[int, float]]] = {}
    for a, b, c in zip(pi.tolist(), gi.tolist(), cnt.tolist()):
        iou = c / (p_area[a] + g_area[b] - c)
        table.setdefault(ppos[a], []).append((gpos[b], iou))
    return pred_ids, gt_ids, table


@dataclass(frozen=True)
class MatchResult:
    """Per-prediction outcome at one IoU threshold, in input order."""

    tp: np.ndarray
    matched_gt: np.ndarray
    iou: np.ndarray
    scores: np.ndarray
    n_gt: int
    tau: float

    @property
    def n_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def n_fp(self) -> int:
        return int(self.tp.size - self.tp.sum())

    @property
    def n_fn(self) -> int:
        return self.n_gt - self.n_tp

    @staticmethod
    def concat(results: Sequence["MatchResult"]) -> "MatchResult":
        """Pool matches from several images (ranked jointly by score later)."""
        if not results:
            raise ValueError("nothing to pool")
        taus = {r.tau for r in results}
        if len(taus) != 1:
            raise ValueError("cannot pool matches made at different thresholds")
        offs = np.cumsum([0] + [r.n_gt for r in results[:-1]])
        return MatchResult(
            np.concatenate([r.tp for r in results]),
            np.concatenate([np.where(r.matched_gt >= 0, r.matched_gt + o, -1)
                            for r, o in zip(results, offs)]),
            np.concatenate([r.iou for r in results]),
            np.concatenate([r.scores for r in results]),
            int(sum(r.n_gt for r in results)), results[0].tau)


def score_order(scores: np.ndarray) -> np.ndarray:
    """Descending score, ties by input position."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _greedy(candidates, scores: np.ndarray, n_gt: int, tau: float) -> MatchResult:
    n = len(scores)
    tp = np.zeros(n, dtype=bool)
    matched = np.full(n, -1, dtype=np.int64)
    best_iou = np.zeros(n)
    taken = np.zeros(n_gt, dtype=bool)
    for i in score_order(scores):
        best, bj = -1.0, -1
        for j, v in candidates(i):
            if not taken[j] and (v > best or (v == best and j < bj)):
                best, bj = v, j
        if bj >= 0:
            best_iou[i] = best
            if best >= tau:
                tp[i] = True
                matched[i] = bj
                taken[bj] = True
    return MatchResult(tp, matched, best_iou, np.asarray(scores, dtype=np.float64), n_gt, tau)


def match_ious(ious: np.ndarray, scores: Sequence[float], tau: float) -> MatchResult:
    """Greedy matching from a dense IoU table."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    ious = np.asarray(ious, dtype=np.float64)
    n_gt = ious.shape[1] if ious.ndim == 2 else 0
    rows = [list(enumerate(r.tolist())) for r in ious] if n_gt else [[] for _ in scores]
    return _greedy(lambda i: rows[i], np.asarray(scores, dtype=np.float64), n_gt, tau)


def match_table(table: dict[int, list[tuple[int, float]]], scores: Sequence[float],
                n_gt: int, tau: float) -> MatchResult:
    """Greedy matching from a sparse IoU table (see ``label_iou_table``)."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    return _greedy(lambda i: table.get(i, ()), np.asarray(scores, dtype=np.float64), n_gt, tau)


def match_predictions(preds: Sequence[np.ndarray], scores: Sequence[float],
                      gts: Sequence[np.ndarray], tau: float) -> MatchResult:
    """Highest score first, each prediction claims the unmatched ground truth
    it overlaps most; it is a true positive when that IoU reaches ``tau``."""
    if len(preds) != len(scores):
        raise ValueError("one score per prediction required")
    return match_ious(iou_matrix(preds, gts), scores, tau)


@dataclass(frozen=True)
class PRCurve:
    """Recall/precision after each ranked prediction, starting at (0, 1)."""

    recall: np.ndarray
    precision: np.ndarray


def pr_curve(match: MatchResult) -> PRCurve:
    if match.n_gt <= 0:
        raise UndefinedAPError("average precision is undefined without ground truth")
    order = score_order(match.scores)
    tp = match.tp[order].astype(np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = np.concatenate([[0.0], ctp / match.n_gt])
    with np.errstate(invalid="ignore"):
        precision = np.concatenate([[1.0], ctp / np.maximum(ctp + cfp, 1.0)])
    return PRCurve(recall, precision)


def average_precision(match: MatchResult, mode: str = "all_point") -> float:
    """Area under the precision-recall curve.

    ``all_point`` sums every rank step k = 1..n as
    (r(k) - r(k-1)) * max(p(k), p(k-1)) with r(0) = 0, p(0) = 1.
    ``coco101`` averages the monotone precision envelope at 101 recall levels.
    """
    curve = pr_curve(match)
    r, p = curve.recall, curve.precision
    if mode == "all_point":
        return float(np.sum(np.diff(r) * np.maximum(p[1:], p[:-1])))
    if mode == "coco101":
        if r.size == 1:
            return 0.0
        pp = p[1:]
        env = np.maximum.accumulate(pp[::-1])[::-1]
        # recall(k) >= i/100 tested on integers so exact hits are not lost to rounding
        ctp = np.cumsum(match.tp[score_order(match.scores)]).astype(np.int64)
        idx = np.searchsorted(ctp * 100, np.arange(101) * match.n_gt, side="left")
        vals = np.where(idx < pp.size, env[np.minimum(idx, pp.size - 1)], 0.0)
        return float(vals.mean())
    raise ValueError(f"unknown AP mode {mode!r}")


def map_at(preds: Sequence[np.ndarray], scores: Sequence[float], gts: Sequence[np.ndarray],
           thresholds: Sequence[float] = MAP5095, mode: str = "all_point") -> float:
    """Mean of AP over IoU thresholds (single class, so mAP@t is AP@t)."""
    if len(thresholds) == 0:
        raise ValueError("at least one threshold required")
    ious = iou_matrix(preds, gts)
    return float(np.mean([average_precision(match_ious(ious, scores, t), mode)
                          for t in thresholds]))


def summarize(matches_by_tau: dict[float, MatchResult], n_pred: int,
              mode: str = "all_point") -> dict:
    """The ``eval`` report: mAP@0.5, mAP@[0.5:0.95] and per-threshold counts."""
    per = []
    for tau in sorted(matches_by_tau):
        m = matches_by_tau[tau]
        per.append({"tau": tau, "ap": average_precision(m, mode),
                    "tp": m.n_tp, "fp": m.n_fp, "fn": m.n_fn})
    aps = {row["tau"]: row["ap"] for row in per}
    n_gt = next(iter(matches_by_tau.values())).n_gt if matches_by_tau else 0
    return {
        "map50": aps.get(0.5),
        "map5095": float(np.mean([aps[t] for t in MAP5095])) if all(t in aps for t in MAP5095) else None,
        "per_threshold": per,
        "n_gt": int(n_gt),
        "n_pred": int(n_pred),
        "ap_mode": mode,
    }


def label_raster_matches(pred_labels: np.ndarray, gt_labels: np.ndarray,
                         scores: Optional[dict[int, float]] = None,
                         thresholds: Sequence[float] = MAP5095
                         ) -> tuple[dict[float, MatchResult], int]:
    """Matches of a predicted label raster against a ground-truth one.

    Without ``scores`` every field scores 1.0 and ranks by label id.
    """
    pred_ids, gt_ids, table = label_iou_table(pred_labels, gt_labels)
    sc = np.array([1.0 if scores is None else float(scores.get(int(i), 1.0))
                   for i in pred_ids])
    return {t: match_table(table, sc, len(gt_ids), t) for t in thresholds}, len(pred_ids)


def evaluate_label_rasters(pred_labels: np.ndarray, gt_labels: np.ndarray,
                           scores: Optional[dict[int, float]] = None,
                           thresholds: Sequence[float] = MAP5095,
                           mode: str = "all_point") -> dict:
    matches, n_pred = label_raster_matches(pred_labels, gt_labels, scores, thresholds)
    return summarize(matches, n_pred, mode)


def tile_matches(tiles: Sequence[tuple[Sequence[np.ndarray], Sequence[float], Sequence[np.ndarray]]],
                 thresholds: Sequence[float] = MAP5095
                 ) -> tuple[dict[float, MatchResult], int]:
    """Pool (pred masks, scores, gt masks) triples from many tiles, COCO style."""
    ious = [iou_matrix(list(p), list(g)) for p, _, g in tiles]
    n_pred = sum(len(p) for p, _, _ in tiles)
    matches = {}
    for t in thresholds:
        per = []
        for m, (_, s, g) in zip(ious, tiles):
            if len(g):
                per.append(match_ious(m, s, t))
            else:
                n = len(s)
                per.append(MatchResult(np.zeros(n, bool), np.full(n, -1), np.zeros(n),
                                       np.asarray(s, dtype=np.float64), 0, t))
        matches[t] = MatchResult.concat(per)
    return matches, n_pred


def evaluate_tiles(tiles, thresholds: Sequence[float] = MAP5095, mode: str = "all_point") -> dict:
    matches, n_pred = tile_matches(tiles, thresholds)
    return summarize(matches, n_pred, mode)


def size_histogram(areas_ha: Sequence[float], bin_edges_ha: Sequence[float] = DECADE_EDGES_HA
                   ) -> np.ndarray:
    """Counts per half-open bin [e_i, e_{i+1}); areas outside the edges are ignored."""
    edges = np.asarray(bin_edges_ha, dtype=np.float64)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    a = np.asarray(areas_ha, dtype=np.float64)
    idx = np.searchsorted(edges, a, side="right") - 1
    ok = (idx >= 0) & (idx < edges.size - 1)
    return np.bincount(idx[ok], minlength=edges.size - 1)


def size_stats(areas_ha: Sequence[float], bin_edges_ha: Sequence[float] = DECADE_EDGES_HA,
               floor_ha: float = SIZE_FLOOR_HA) -> dict:
    """The ``stats`` report."""
    a = np.asarray(areas_ha, dtype=np.float64)
    counts = size_histogram(a, bin_edges_ha)
    return {
        "edges_ha": [float(e) for e in bin_edges_ha],
        "counts": [int(c) for c in counts],
        "total_fields": int(a.size),
        "total_area_ha": float(a.sum()),
        "floor_ha": float(floor_ha),
        "fields_above_floor": int(np.count_nonzero(a > floor_ha)),
    }
