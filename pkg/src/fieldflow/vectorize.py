"""Label raster to vector polygons.

Boundaries follow pixel edges, so neighbouring fields are traced from the
very same vertex chains. Simplification runs on the chains between junction
vertices ("arcs") rather than on whole rings: both fields sharing an arc get
the identical simplified chain, which keeps the coverage gap- and
overlap-free.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import shapely
from scipy import ndimage

from .raster import GeoTransform
from .unify import FieldLabelRaster

log = logging.getLogger(__name__)

COORD_DECIMALS = 6


class TopologyError(RuntimeError):
    """Output polygons overlap or have broken rings. Always an upstream bug."""

    def __init__(self, message: str, ids: Sequence[int] = ()):
        super().__init__(message)
        self.ids = tuple(ids)


@dataclass(eq=False)
class FieldPolygon:
    id: int
    exterior: np.ndarray
    holes: list[np.ndarray] = field(default_factory=list)
    area_ha: float = 0.0
    valid_fraction: float = 1.0
    n_merged: int = 1
    source_resolution_m: float = 0.0

    @property
    def rings(self) -> list[np.ndarray]:
        return [self.exterior, *self.holes]

    def to_shapely(self) -> shapely.Polygon:
        return shapely.Polygon(self.exterior, self.holes)


def signed_area(ring: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise rings (y up)."""
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def polygon_area_ha(exterior: np.ndarray, holes: Sequence[np.ndarray]) -> float:
    m2 = abs(signed_area(exterior)) - sum(abs(signed_area(h)) for h in holes)
    return m2 / 10000.0


# --------------------------------------------------------------------------
# tracing


@dataclass(eq=False)
class TracedRing:
    """Closed pixel-edge ring in global pixel-corner coordinates.

    ``vertices`` is (N, 2) int64 (x, y) without the closing repeat; only
    corners and junction vertices are kept. ``nodes`` flags the junctions.
    """

    vertices: np.ndarray
    nodes: np.ndarray
    is_hole: bool


@dataclass(eq=False)
class TracedLabel:
    id: int
    exterior: TracedRing
    holes: list[TracedRing]
    area_px: int


def _ring_cycles(nxt: np.ndarray) -> list[list[int]]:
    n = nxt.size
    seen = np.zeros(n, dtype=bool)
    nxt_l = nxt.tolist()
    cycles = []
    for e0 in range(n):
        if seen[e0]:
            continue
        cyc = []
        e = e0
        while not seen[e]:
            seen[e] = True
            cyc.append(e)
            e = nxt_l[e]
        cycles.append(cyc)
    return cycles


def _trace_one(labels: np.ndarray, lab: int, sl: tuple[slice, slice]) -> list[TracedRing]:
    H, W = labels.shape
    r0, r1 = sl[0].start, sl[0].stop
    c0, c1 = sl[1].start, sl[1].stop
    h, w = r1 - r0, c1 - c0
    ctx = np.full((h + 2, w + 2), -1, dtype=np.int64)
    rr0, rr1 = max(r0 - 1, 0), min(r1 + 1, H)
    cc0, cc1 = max(c0 - 1, 0), min(c1 + 1, W)
    ctx[rr0 - (r0 - 1):rr1 - (r0 - 1), cc0 - (c0 - 1):cc1 - (c0 - 1)] = labels[rr0:rr1, cc0:cc1]
    own = ctx == lab
    Wp = w + 2
    inner = own[1:-1, 1:-1]
    starts, ends, pix, dirs = [], [], [], []
    # (neighbour offset, start corner, end corner, direction code)
    specs = (
        ((-1, 0), (1, 0), (0, 0), 0),   # top edge, heading -x
        ((0, -1), (0, 0), (0, 1), 1),   # left edge, heading +y
        ((1, 0), (0, 1), (1, 1), 2),    # bottom edge, heading +x
        ((0, 1), (1, 1), (1, 0), 3),    # right edge, heading -y
    )
    for (dr, dc), (sx, sy), (ex, ey), d in specs:
        nb = own[1 + dr:h + 1 + dr, 1 + dc:w + 1 + dc]
        ii, jj = np.nonzero(inner & ~nb)
        ii = ii + 1
        jj = jj + 1
        starts.append((ii + sy) * (Wp + 1) + (jj + sx))
        ends.append((ii + ey) * (Wp + 1) + (jj + ex))
        pix.append(ii * Wp + jj)
        dirs.append(np.full(ii.size, d, dtype=np.int8))
    start = np.concatenate(starts)
    end = np.concatenate(ends)
    pixel = np.concatenate(pix)
    dirc = np.concatenate(dirs)
    order = np.argsort(start, kind="stable")
    sorted_start = start[order]
    first = np.searchsorted(sorted_start, end, side="left")
    last = np.searchsorted(sorted_start, end, side="right")
    cand = order[first]
    two = (last - first) == 2
    if two.any():
        # saddle vertex: continue onto the other pixel so the label stays one
        # ring and the pinched-off background becomes a hole touching it
        alt = order[np.minimum(first + 1, order.size - 1)]
        pick_alt = two & (pixel[cand] == pixel)
        cand = np.where(pick_alt, alt, cand)
    nxt = cand
    vx = start % (Wp + 1)
    vy = start // (Wp + 1)
    # junction test on the 2x2 pixels around each vertex
    a = ctx[vy - 1, vx - 1]
    b = ctx[vy - 1, vx]
    c = ctx[vy, vx - 1]
    d = ctx[vy, vx]
    n_distinct = 1 + (b != a) + ((c != a) & (c != b)) + ((d != a) & (d != b) & (d != c))
    saddle = (n_distinct == 2) & (a == d) & (b == c) & (a != b)
    is_node = (n_distinct >= 3) | saddle
    rings = []
    for cyc in _ring_cycles(nxt):
        idx = np.asarray(cyc)
        dprev = np.roll(dirc[idx], 1)
        keep = (dirc[idx] != dprev) | is_node[idx]
        verts = np.stack([vx[idx] + (c0 - 1), vy[idx] + (r0 - 1)], axis=1).astype(np.int64)
        # area sign in y-down pixel space: exterior rings are negative
        closed = np.vstack([verts, verts[:1]])
        area = signed_area(closed.astype(np.float64))
        rings.append(TracedRing(verts[keep], is_node[idx][keep], area > 0))
    return rings


def trace_labels(raster: FieldLabelRaster | np.ndarray) -> list[TracedLabel]:
    labels = raster.labels if isinstance(raster, FieldLabelRaster) else np.asarray(raster)
    out = []
    if labels.size == 0:
        return out
    n = int(labels.max())
    if n == 0:
        return out
    objs = ndimage.find_objects(labels, max_label=n)
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    for i, sl in enumerate(objs, start=1):
        if sl is None:
            continue
        rings = _trace_one(labels, i, sl)
        exteriors = [r for r in rings if not r.is_hole]
        holes = [r for r in rings if r.is_hole]
        if len(exteriors) != 1:
            raise TopologyError(
                f"label {i} has {len(exteriors)} separate parts; expected one", [i])
        out.append(TracedLabel(i, exteriors[0], holes, int(counts[i])))
    return out


def _to_world(verts: np.ndarray, gt: GeoTransform, reverse: bool) -> np.ndarray:
    xy = np.empty((verts.shape[0] + 1, 2), dtype=np.float64)
    xy[:-1, 0] = gt.origin_x + verts[:, 0] * gt.pixel_size_x
    xy[:-1, 1] = gt.origin_y - verts[:, 1] * gt.pixel_size_y
    xy[-1] = xy[0]
    return xy[::-1].copy() if reverse else xy


def _attrs(raster, lab):
    if isinstance(raster, FieldLabelRaster):
        return raster.attrs.get(lab, {})
    return {}


def _build_polygon(lab: int, ext_px: np.ndarray, holes_px: Sequence[np.ndarray],
                   gt: GeoTransform, attrs: dict) -> FieldPolygon:
    # y-down pixel space flips orientation: exterior comes out CCW in world space
    ext = _to_world(ext_px, gt, reverse=False)
    holes = [_to_world(h, gt, reverse=False) for h in holes_px]
    if signed_area(ext) < 0:
        ext = ext[::-1].copy()
    holes = [h if signed_area(h) < 0 else h[::-1].copy() for h in holes]
    return FieldPolygon(
        id=lab, exterior=ext, holes=holes, area_ha=polygon_area_ha(ext, holes),
        valid_fraction=float(attrs.get("valid_fraction", 1.0)),
        n_merged=int(attrs.get("n_merged", 1)),
        source_resolution_m=gt.resolution)


def trace_polygons(raster: FieldLabelRaster) -> list[FieldPolygon]:
    """One polygon per label, with holes, following pixel borders exactly."""
    gt = raster.geotransform
    present = set(raster.id_areas)
    for lab in sorted(set(range(1, raster.next_id)) & set(raster.attrs) - present):
        log.warning("label %d has no pixels; skipped", lab)
    return [_build_polygon(t.id, t.exterior.vertices, [h.vertices for h in t.holes],
                           gt, _attrs(raster, t.id))
            for t in trace_labels(raster)]


# --------------------------------------------------------------------------
# simplification


def _seg_dist(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    L2 = float(ab @ ab)
    ap = pts - a
    if L2 == 0.0:
        return np.hypot(ap[:, 0], ap[:, 1])
    t = np.clip((ap @ ab) / L2, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = pts - proj
    return np.hypot(d[:, 0], d[:, 1])


# below this many vertices plain Python beats numpy call overhead
_SMALL_ARC = 32


def _dp_span(pts: list, tolerance: float, keep: list, i0: int, j0: int) -> None:
    """Pure-Python farthest-point recursion over pts[i0..j0], marking ``keep``."""
    stack = [(i0, j0)]
    hypot = math.hypot
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        ax, ay = pts[i]
        bx, by = pts[j]
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        best, bk = -1.0, -1
        for k in range(i + 1, j):
            px, py = pts[k]
            if L2 == 0.0:
                d = hypot(px - ax, py - ay)
            else:
                t = ((px - ax) * dx + (py - ay) * dy) / L2
                t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
                d = hypot(px - (ax + t * dx), py - (ay + t * dy))
            if d > best:
                best, bk = d, k
        if best > tolerance:
            keep[bk] = True
            stack.append((bk, j))
            stack.append((i, bk))


def _dp_small(pts: list, tolerance: float) -> list[int]:
    n = len(pts)
    keep = [False] * n
    keep[0] = keep[-1] = True
    _dp_span(pts, tolerance, keep, 0, n - 1)
    return [k for k in range(n) if keep[k]]


def douglas_peucker(points: np.ndarray, tolerance: float) -> np.ndarray:
    """Indices kept by recursive farthest-point simplification of a polyline.

    Endpoints always survive; distances are measured to the segment, not the
    infinite line.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n <= 2:
        return np.arange(n)
    if n <= _SMALL_ARC:
        return np.array(_dp_small(pts.tolist(), tolerance), dtype=np.int64)
    keep = [False] * n
    keep[0] = keep[-1] = True
    as_list = None
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        if j - i <= _SMALL_ARC:
            if as_list is None:
                as_list = pts.tolist()
            _dp_span(as_list, tolerance, keep, i, j)
            continue
        d = _seg_dist(pts[i + 1:j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > tolerance:
            m = i + 1 + k
            keep[m] = True
            stack.append((m, j))
            stack.append((i, m))
    return np.flatnonzero(keep)


def simplify_ring(ring: np.ndarray, tolerance: float) -> np.ndarray:
    """Simplify a closed ring anchored at its first vertex and the vertex farthest from it."""
    ring = np.asarray(ring, dtype=np.float64)
    if tolerance <= 0 or len(ring) <= 4:
        return ring.copy()
    open_ = ring[:-1]
    d = np.hypot(*(open_ - open_[0]).T)
    k = int(np.argmax(d))
    if k == 0:
        return ring.copy()
    first = douglas_peucker(open_[:k + 1], tolerance)
    second = douglas_peucker(np.vstack([open_[k:], open_[:1]]), tolerance) + k
    idx = np.concatenate([first, second[1:]])
    out = np.vstack([open_[idx[:-1]], open_[:1]]) if idx[-1] == len(open_) else open_[idx]
    if out.shape[0] < 4:
        return ring.copy()
    if not np.array_equal(out[0], out[-1]):
        out = np.vstack([out, out[:1]])
    return out


def simplify_polygon(poly: FieldPolygon, tolerance: float) -> FieldPolygon:
    """Simplify every ring independently; rings that stop being simple fall back."""
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    if tolerance == 0:
        return poly
    rings = []
    for r in poly.rings:
        s = simplify_ring(r, tolerance)
        if len(s) < 4 or not shapely.LinearRing(s).is_simple or signed_area(s) == 0:
            s = r
        rings.append(s)
    ext, holes = rings[0], rings[1:]
    if not shapely.Polygon(ext, holes).is_valid:
        ext, holes = poly.exterior, list(poly.holes)
    return replace(poly, exterior=ext, holes=holes, area_ha=polygon_area_ha(ext, holes))


def _split_arcs(ring: TracedRing) -> list[tuple[np.ndarray, bool]]:
    """Cut a ring at junctions; returns (vertices, closed) pieces in ring order."""
    v = ring.vertices
    node_idx = np.flatnonzero(ring.nodes)
    if node_idx.size == 0:
        return [(v, True)]
    v = np.roll(v, -node_idx[0], axis=0)
    node_idx = node_idx - node_idx[0]
    bounds = list(node_idx) + [len(v)]
    vv = np.vstack([v, v[:1]])
    return [(vv[s:e + 1], False) for s, e in zip(bounds[:-1], bounds[1:])]


def _canonical(arc: np.ndarray, closed: bool) -> tuple[np.ndarray, bool]:
    """Orientation-independent form of an arc; returns (canonical, reversed?)."""
    if closed:
        i = int(np.lexsort((arc[:, 1], arc[:, 0]))[0])
        fwd = np.roll(arc, -i, axis=0)
        bwd = np.roll(arc[::-1], -(len(arc) - 1 - i), axis=0)
        if tuple(bwd[1]) < tuple(fwd[1]):
            return bwd, True
        return fwd, False
    head, tail = tuple(arc[0]), tuple(arc[-1])
    if tail < head or (tail == head and tuple(map(tuple, arc[::-1])) < tuple(map(tuple, arc))):
        return arc[::-1], True
    return arc, False


class _ArcSimplifier:
    def __init__(self, gt: GeoTransform, tolerance: float):
        self.gt = gt
        self.tol = tolerance
        self.cache: dict[bytes, np.ndarray] = {}
        self.raw: set[bytes] = set()

    def key(self, arc: np.ndarray, closed: bool) -> tuple[bytes, np.ndarray, bool]:
        canon, rev = _canonical(arc, closed)
        return (b"c" if closed else b"o") + canon.tobytes(), canon, rev

    def simplified(self, key: bytes, canon: np.ndarray, closed: bool) -> np.ndarray:
        """Vertex subset (pixel coords) of the canonical arc."""
        if key in self.raw or self.tol <= 0:
            return canon
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if not closed and len(canon) <= 2:
            self.cache[key] = canon
            return canon
        world = np.empty(canon.shape, dtype=np.float64)
        world[:, 0] = canon[:, 0] * self.gt.pixel_size_x
        world[:, 1] = canon[:, 1] * -self.gt.pixel_size_y
        if closed:
            d = np.hypot(*(world - world[0]).T)
            k = int(np.argmax(d))
            if k == 0 or len(canon) <= 4:
                out = canon
            else:
                a = douglas_peucker(world[:k + 1], self.tol)
                b = douglas_peucker(np.vstack([world[k:], world[:1]]), self.tol) + k
                idx = np.concatenate([a, b[1:-1]])
                out = canon[idx] if len(idx) >= 3 else canon
        else:
            out = canon[douglas_peucker(world, self.tol)]
        self.cache[key] = out
        return out


def _assemble(ring: TracedRing, simp: _ArcSimplifier, keys_out: list) -> np.ndarray:
    pieces = []
    for arc, closed in _split_arcs(ring):
        key, canon, rev = simp.key(arc, closed)
        keys_out.append(key)
        s = simp.simplified(key, canon, closed)
        if rev:
            s = s[::-1]
        if closed:
            return s
        pieces.append(s[:-1])
    return np.vstack(pieces)


def simplify_coverage(traced: Sequence[TracedLabel], raster: FieldLabelRaster,
                      tolerance: float, max_rounds: int = 50) -> list[FieldPolygon]:
    """Simplify a whole traced coverage with shared arcs kept identical.

    Polygons that become invalid or overlap a neighbour get all their arcs
    reverted to the exact pixel chain, repeated until the coverage is clean.
    """
    gt = raster.geotransform
    simp = _ArcSimplifier(gt, tolerance)

    def build(t: TracedLabel):
        keys: list[bytes] = []
        ext = _assemble(t.exterior, simp, keys)
        holes = [_assemble(h, simp, keys) for h in t.holes]
        return _build_polygon(t.id, ext, holes, gt, _attrs(raster, t.id)), keys

    polys, keys = {}, {}
    for t in traced:
        polys[t.id], keys[t.id] = build(t)
    if tolerance <= 0:
        return [polys[t.id] for t in traced]
    by_id = {t.id: t for t in traced}
    arc_owners: dict[bytes, list[int]] = {}
    for lab, ks in keys.items():
        for k in ks:
            arc_owners.setdefault(k, []).append(lab)

    suspects = set(polys)
    for _ in range(max_rounds):
        bad = _find_bad(polys, suspects)
        if not bad:
            break
        new_raw = {k for lab in bad for k in keys[lab]} - simp.raw
        if not new_raw:
            raise TopologyError("exact pixel geometry is itself invalid", sorted(bad))
        simp.raw |= new_raw
        touched = {o for k in new_raw for o in arc_owners[k]}
        for lab in touched:
            polys[lab], keys[lab] = build(by_id[lab])
        suspects = touched
    else:
        raise TopologyError("coverage simplification did not converge")
    return [polys[t.id] for t in traced]


def _find_bad(polys: dict[int, FieldPolygon], suspects: Iterable[int]) -> set[int]:
    ids = sorted(polys)
    bad = set()
    geoms = np.empty(len(ids), dtype=object)
    for n, i in enumerate(ids):
        p = polys[i]
        # two-vertex rings (an arc pair collapsed onto its nodes) are degenerate
        if any(len(r) < 4 for r in p.rings):
            bad.add(i)
            geoms[n] = shapely.Polygon()
        else:
            geoms[n] = p.to_shapely()
    pos = {i: n for n, i in enumerate(ids)}
    sus = np.array(sorted(pos[i] for i in suspects), dtype=np.int64)
    if sus.size == 0:
        return bad
    valid = shapely.is_valid(geoms[sus])
    bad.update(ids[j] for j in sus[~valid])
    for a, b in overlapping_pairs(geoms, sus):
        bad.add(ids[a])
        bad.add(ids[b])
    return bad


def overlapping_pairs(geoms: np.ndarray, subset: Optional[np.ndarray] = None) -> list[tuple[int, int]]:
    """Index pairs whose interiors intersect (touching borders are fine)."""
    if len(geoms) < 2:
        return []
    tree = shapely.STRtree(geoms)
    q = geoms if subset is None else geoms[subset]
    src, dst = tree.query(q, predicate="intersects")
    if subset is not None:
        src = subset[src]
    m = src != dst
    src, dst = src[m], dst[m]
    if src.size == 0:
        return []
    inner = shapely.relate_pattern(geoms[src], geoms[dst], "T********")
    pairs = {(int(min(a, b)), int(max(a, b))) for a, b in zip(src[inner], dst[inner])}
    return sorted(pairs)


# --------------------------------------------------------------------------
# validation and output


def default_tolerance(gt: GeoTransform) -> float:
    return 0.5 * min(gt.pixel_size_x, gt.pixel_size_y)


def check_topology(polygons: Sequence[FieldPolygon]) -> None:
    """Raise ``TopologyError`` for broken rings or overlapping interiors."""
    for p in polygons:
        for k, r in enumerate(p.rings):
            if len(r) < 4 or not np.array_equal(r[0], r[-1]):
                raise TopologyError(f"polygon {p.id}: ring {k} is not closed", [p.id])
            a = signed_area(r)
            if (k == 0 and a <= 0) or (k > 0 and a >= 0):
                raise TopologyError(f"polygon {p.id}: ring {k} has the wrong orientation", [p.id])
    if not polygons:
        return
    geoms = np.array([p.to_shapely() for p in polygons], dtype=object)
    valid = shapely.is_valid(geoms)
    if not valid.all():
        i = int(np.flatnonzero(~valid)[0])
        reason = shapely.is_valid_reason(geoms[i])
        raise TopologyError(f"polygon {polygons[i].id} is invalid: {reason}", [polygons[i].id])
    pairs = overlapping_pairs(geoms)
    if pairs:
        a, b = pairs[0]
        ia, ib = polygons[a].id, polygons[b].id
        raise TopologyError(f"polygons {ia} and {ib} overlap", [ia, ib])


def validate_and_clean(polygons: Sequence[FieldPolygon], min_area_ha: float,
                       min_hole_ha: Optional[float] = None
                       ) -> tuple[list[FieldPolygon], list[dict]]:
    """Drop slivers and fill small holes, then verify the coverage topology."""
    if min_hole_ha is None:
        min_hole_ha = min_area_ha / 4.0
    report = []
    kept = []
    for p in polygons:
        if p.area_ha < min_area_ha:
            report.append({"id": p.id, "action": "dropped", "reason": "sliver",
                           "area_ha": p.area_ha})
        else:
            kept.append(p)
    if kept:
        reps = shapely.point_on_surface(np.array([p.to_shapely() for p in kept], dtype=object))
        tree = shapely.STRtree(reps)
    out = []
    for p in kept:
        holes = []
        for h in p.holes:
            ha = abs(signed_area(h)) / 10000.0
            if ha < min_hole_ha:
                inside = tree.query(shapely.Polygon(h), predicate="contains")
                if inside.size == 0:
                    report.append({"id": p.id, "action": "filled_hole", "reason": "small_hole",
                                   "area_ha": ha})
                    continue
            holes.append(h)
        if len(holes) != len(p.holes):
            p = replace(p, holes=holes, area_ha=polygon_area_ha(p.exterior, holes))
        out.append(p)
    check_topology(out)
    return out, report


def _round_ring(r: np.ndarray) -> list[list[float]]:
    return [[round(float(x), COORD_DECIMALS), round(float(y), COORD_DECIMALS)] for x, y in r]


def to_feature_collection(polygons: Sequence[FieldPolygon], crs_epsg: int = 0) -> dict:
    feats = []
    for p in sorted(polygons, key=lambda p: p.id):
        feats.append({
            "type": "Feature",
            "id": int(p.id),
            "properties": {
                "id": int(p.id),
                "area_ha": float(p.area_ha),
                "valid_fraction": float(p.valid_fraction),
                "n_merged": int(p.n_merged),
                "source_resolution_m": float(p.source_resolution_m),
            },
            "geometry": {"type": "Polygon",
                         "coordinates": [_round_ring(r) for r in p.rings]},
        })
    return {"type": "FeatureCollection", "crs_epsg": int(crs_epsg), "features": feats}


def write_geojson(polygons: Sequence[FieldPolygon], path: str | Path, crs_epsg: int = 0) -> None:
    """Serialize as a FeatureCollection; identical input gives identical bytes."""
    doc = to_feature_collection(polygons, crs_epsg)
    text = json.dumps(doc, separators=(",", ":"), sort_keys=False)
    Path(path).write_text(text + "\n")


def read_geojson(path: str | Path) -> tuple[list[FieldPolygon], int]:
    doc = json.loads(Path(path).read_text())
    polys = []
    for n, f in enumerate(doc.get("features", [])):
        g = f["geometry"]
        if g["type"] != "Polygon":
            raise ValueError(f"feature {n}: only Polygon geometries are supported")
        rings = [np.asarray(r, dtype=np.float64) for r in g["coordinates"]]
        props = f.get("properties") or {}
        ext, holes = rings[0], rings[1:]
        polys.append(FieldPolygon(
            id=int(props.get("id", f.get("id", n + 1))), exterior=ext, holes=holes,
            area_ha=float(props.get("area_ha", polygon_area_ha(ext, holes))),
            valid_fraction=float(props.get("valid_fraction", 1.0)),
            n_merged=int(props.get("n_merged", 1)),
            source_resolution_m=float(props.get("source_resolution_m", 0.0))))
    return polys, int(doc.get("crs_epsg", 0))


def rasterize_polygons(polygons: Sequence[FieldPolygon], gt: GeoTransform,
                       width: int, height: int) -> np.ndarray:
    """Burn polygons into a u32 label grid; a pixel belongs to a polygon when its
    center is inside (even-odd rule over all rings)."""
    out = np.zeros((height, width), dtype=np.uint32)
    for p in polygons:
        xs0, ys0, xs1, ys1 = [], [], [], []
        for r in p.rings:
            px = (r[:, 0] - gt.origin_x) / gt.pixel_size_x
            py = (gt.origin_y - r[:, 1]) / gt.pixel_size_y
            xs0.append(px[:-1]); ys0.append(py[:-1]); xs1.append(px[1:]); ys1.append(py[1:])
        x0 = np.concatenate(xs0); y0 = np.concatenate(ys0)
        x1 = np.concatenate(xs1); y1 = np.concatenate(ys1)
        lo = np.minimum(y0, y1)
        hi = np.maximum(y0, y1)
        # rows whose center y = r + 0.5 satisfies lo <= yc < hi
        r_first = np.ceil(lo - 0.5).astype(np.int64)
        r_last = np.ceil(hi - 0.5).astype(np.int64)  # exclusive
        n_rows = np.maximum(r_last - r_first, 0)
        if n_rows.sum() == 0:
            continue
        e = np.repeat(np.arange(x0.size), n_rows)
        offs = np.arange(n_rows.sum()) - np.repeat(np.cumsum(n_rows) - n_rows, n_rows)
        row = r_first[e] + offs
        yc = row + 0.5
        t = (yc - y0[e]) / (y1[e] - y0[e])
        xc = x0[e] + t * (x1[e] - x0[e])
        order = np.lexsort((xc, row))
        row, xc = row[order], xc[order]
        ra, rb = row[0::2], row[1::2]
        if ra.size != rb.size or np.any(ra != rb):
            raise TopologyError(f"polygon {p.id}: unbalanced ring crossings", [p.id])
        ca = np.ceil(xc[0::2] - 0.5).astype(np.int64)
        cb = np.ceil(xc[1::2] - 0.5).astype(np.int64)
        ca = np.clip(ca, 0, width)
        cb = np.clip(cb, 0, width)
        valid = (ra >= 0) & (ra < height) & (cb > ca)
        ra, ca, cb = ra[valid], ca[valid], cb[valid]
        if ra.size == 0:
            continue
        rmin, rmax = int(ra.min()), int(ra.max())
        cmin, cmax = int(ca.min()), int(cb.max())
        diff = np.zeros((rmax - rmin + 1, cmax - cmin + 1), dtype=np.int32)
        np.add.at(diff, (ra - rmin, ca - cmin), 1)
        np.add.at(diff, (ra - rmin, cb - cmin), -1)
        cover = np.cumsum(diff, axis=1)[:, :-1] > 0
        out[rmin:rmax + 1, cmin:cmax][cover] = p.id
    return out


def vectorize_raster(raster: FieldLabelRaster, tolerance: Optional[float] = None,
                     min_area_ha: float = 0.0, min_hole_ha: Optional[float] = None
                     ) -> tuple[list[FieldPolygon], list[dict]]:
    """Trace, simplify (shared arcs) and clean a label raster."""
    tol = default_tolerance(raster.geotransform) if tolerance is None else tolerance
    traced = trace_labels(raster)
    polys = simplify_coverage(traced, raster, tol)
    return validate_and_clean(polys, min_area_ha, min_hole_ha)
