"""End-to-end driver: plan -> segment -> refine -> unify -> vectorize.

A run is described by one JSON document (``RunConfig``). Command-line flags
override individual fields of that document; fields absent from both fall
back to the defaults below. Unset area thresholds are derived from the
ground resolution of the input.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .raster import (DEFAULT_EXPAND_RADIUS, DEFAULT_OVERLAP, DEFAULT_TILE_SIZE,
                     ConfigurationError, GeoGrid, GeoTransform, MaskPair,
                     build_context_mask, build_tile_plan, read_bundle, write_bundle)
from .refine import (FieldInstance, RefineParams, min_area_ha_for_resolution,
                     min_area_px, order_by_area, refine_instance, validity_filter)
from .segmenter import (FilePredictionProvider, PredictionSet, TileError, dump_predictions,
                        segment_tile)
from .unify import MergeParams, compact_labels, mosaic, remove_small_labels, resolve_overlaps
from .vectorize import (default_tolerance, simplify_coverage,
                        trace_labels, validate_and_clean, write_geojson)

log = logging.getLogger(__name__)

WORKERS_ENV = "FIELDFLOW_WORKERS"

# keys of the synth provider spec and their types
SYNTH_KEYS = {
    "seed": int, "width": int, "height": int, "n_sites": int,
    "non_field_fraction": float, "resolution_m": float, "border_px": int,
    "merge_prob": float, "drop_prob": float, "jitter_px": int,
}

OUTPUT_FILES = {
    "geojson": "fields.geojson",
    "labels": "labels",
    "validation": "validation_report.json",
    "predictions": "predictions.json",
    "manifest": "manifest.json",
}


def default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigurationError(f"{WORKERS_ENV} must be >= 1")
    return n


def parse_provider(spec: str) -> tuple[str, Any]:
    """``file:<path>`` or ``synth:key=value,...`` -> (kind, path or params)."""
    kind, sep, rest = spec.partition(":")
    if not sep:
        raise ConfigurationError(f"provider {spec!r} must look like file:<path> or synth:<params>")
    if kind == "file":
        if not rest:
            raise ConfigurationError("file provider needs a path")
        return "file", rest
    if kind == "synth":
        params: dict[str, Any] = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, val = item.partition("=")
            if not eq or key not in SYNTH_KEYS:
                raise ConfigurationError(f"bad synth provider parameter {item!r}")
            try:
                params[key] = SYNTH_KEYS[key](val)
            except ValueError:
                raise ConfigurationError(f"synth parameter {key}={val!r} has the wrong type") from None
        for key in ("width", "height", "n_sites"):
            if key not in params:
                raise ConfigurationError(f"synth provider needs {key}")
        return "synth", params
    raise ConfigurationError(f"unknown provider kind {kind!r}")


@dataclass
class RunConfig:
    provider: str
    output_dir: str = "out"
    image: Optional[str] = None
    quality_mask: Optional[str] = None
    context_mask: Optional[str] = None
    expand_radius: int = DEFAULT_EXPAND_RADIUS
    tile_size: int = DEFAULT_TILE_SIZE
    overlap: int = DEFAULT_OVERLAP
    refine: dict = field(default_factory=dict)
    merge: dict = field(default_factory=dict)
    vectorize: dict = field(default_factory=dict)
    workers: Optional[int] = None
    seed: int = 0
    persist_predictions: bool = True

    # fields that do not change the result and stay out of the hash
    VOLATILE = ("output_dir", "workers")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        if "provider" not in doc:
            raise ConfigurationError("config needs a provider")
        doc = copy.deepcopy(doc)
        if base_dir is not None:
            for key in ("image", "quality_mask", "context_mask", "output_dir"):
                if doc.get(key):
                    doc[key] = str(base_dir / doc[key])
            kind, _, rest = str(doc["provider"]).partition(":")
            if kind == "file" and rest:
                doc["provider"] = "file:" + str(base_dir / rest)
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc, path.resolve().parent)

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def with_overrides(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def config_hash(self) -> str:
        doc = {k: v for k, v in self.to_dict().items() if k not in self.VOLATILE}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> None:
        """Check files and parameters before any stage runs."""
        kind, arg = parse_provider(self.provider)
        if kind == "file" and not Path(arg).is_file():
            raise ConfigurationError(f"prediction file {arg} not found")
        if kind == "file" and not self.image:
            raise ConfigurationError("a file provider needs the image bundle for extent and georeferencing")
        for key in ("image", "quality_mask", "context_mask"):
            p = getattr(self, key)
            if p and not Path(p).with_suffix(".json").is_file():
                raise ConfigurationError(f"{key} bundle {p} not found")
        if self.tile_size <= self.overlap or self.overlap < 0:
            raise ConfigurationError(f"tile_size ({self.tile_size}) must exceed overlap ({self.overlap}) >= 0")
        if self.expand_radius < 0:
            raise ConfigurationError("expand_radius must be >= 0")
        if self.workers is not None and self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        _check_keys("refine", self.refine, RefineParams)
        _check_keys("merge", self.merge, MergeParams)
        unknown = set(self.vectorize) - {"tolerance_m", "min_area_ha", "min_hole_ha"}
        if unknown:
            raise ConfigurationError(f"unknown vectorize keys: {', '.join(sorted(unknown))}")
        for key, v in self.vectorize.items():
            if v is not None and v < 0:
                raise ConfigurationError(f"vectorize.{key} must be >= 0")
        try:
            RefineParams(**{k: v for k, v in self.refine.items() if v is not None})
            MergeParams(**{k: v for k, v in self.merge.items() if v is not None})
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None


def _check_keys(section: str, values: dict, cls) -> None:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"unknown {section} keys: {', '.join(sorted(unknown))}")


@dataclass
class _Inputs:
    width: int
    height: int
    gt: GeoTransform
    image: Optional[GeoGrid]
    masks: Optional[MaskPair]
    provider: Any
    landscape: Any = None


def _load_inputs(cfg: RunConfig) -> _Inputs:
    kind, arg = parse_provider(cfg.provider)
    image = read_bundle(cfg.image) if cfg.image else None
    landscape = None
    if kind == "synth":
        from .synth import OracleProvider, generate_landscape
        res = arg.get("resolution_m", 10.0)
        h = arg["height"]
        gt = image.geotransform if image is not None else GeoTransform(0.0, h * res, res, res, 0)
        landscape = generate_landscape(arg.get("seed", cfg.seed), arg["width"], h, arg["n_sites"],
                                       arg.get("non_field_fraction", 0.0), gt,
                                       arg.get("border_px", 1))
        provider = OracleProvider(landscape, arg.get("merge_prob", 0.0), arg.get("drop_prob", 0.0),
                                  arg.get("jitter_px", 0), cfg.seed)
        width, height = arg["width"], h
        if image is not None and (image.width, image.height) != (width, height):
            raise ConfigurationError("image bundle and synth extent differ")
    else:
        provider = FilePredictionProvider.from_file(arg)
        width, height, gt = image.width, image.height, image.geotransform
    masks = None
    if cfg.quality_mask:
        quality = read_bundle(cfg.quality_mask)
        context = (read_bundle(cfg.context_mask) if cfg.context_mask
                   else build_context_mask(quality, cfg.expand_radius))
        masks = MaskPair(quality, context)
        if (quality.width, quality.height) != (width, height):
            raise ConfigurationError("quality mask extent differs from the input")
    elif cfg.context_mask:
        raise ConfigurationError("a context mask needs a quality mask")
    return _Inputs(width, height, gt, image, masks, provider, landscape)


def effective_params(cfg: RunConfig, gt: GeoTransform) -> tuple[RefineParams, MergeParams, dict]:
    """Fill unset thresholds from the resolution table."""
    table_ha = min_area_ha_for_resolution(gt.resolution)
    refine = {k: v for k, v in cfg.refine.items() if v is not None}
    refine.setdefault("min_area_px", min_area_px(gt, table_ha))
    rp = RefineParams(**refine)
    merge = {k: v for k, v in cfg.merge.items() if v is not None}
    merge.setdefault("min_mosaic_area_px", rp.min_area_px)
    mp = MergeParams(**merge)
    vec = {
        "tolerance_m": cfg.vectorize.get("tolerance_m"),
        "min_area_ha": cfg.vectorize.get("min_area_ha"),
        "min_hole_ha": cfg.vectorize.get("min_hole_ha"),
    }
    if vec["tolerance_m"] is None:
        vec["tolerance_m"] = default_tolerance(gt)
    if vec["min_area_ha"] is None:
        vec["min_area_ha"] = table_ha
    if vec["min_hole_ha"] is None:
        vec["min_hole_ha"] = vec["min_area_ha"] / 4.0
    return rp, mp, vec


def _refine_tile(pset: PredictionSet, masks: Optional[MaskPair], params: RefineParams):
    kept, rejected = [], []
    for j, pred in enumerate(pset.predictions):
        inst = refine_instance(FieldInstance.from_prediction(pred, pset.tile_index, j), params)
        if inst.area_px == 0:
            rejected.append({"tile_index": pset.tile_index, "index": j, "reason": "empty",
                             "valid_fraction": 0.0})
            continue
        d = validity_filter(inst, masks, params)
        if d.keep:
            kept.append(d.instance)
        else:
            rejected.append({"tile_index": pset.tile_index, "index": j, "reason": d.reason,
                             "valid_fraction": round(d.valid_fraction, 6)})
    return kept, rejected


class _Clock:
    def __init__(self):
        self.stages: dict[str, float] = {}

    def run(self, name, fn, *args, **kwargs):
        t = time.perf_counter()
        out = fn(*args, **kwargs)
        self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t
        return out


def _dump_json(doc: dict, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_pipeline(cfg: RunConfig) -> dict:
    """Execute a full run and return its manifest (also written to disk).

    Output bytes depend only on the config, never on the worker count: tiles
    are processed in parallel but collected in tile order, and everything
    after refinement is a sequential reduction.
    """
    cfg.validate()
    workers = cfg.workers or default_workers()
    out_dir = Path(cfg.output_dir)
    try:
        inputs = _load_inputs(cfg)
    except (OSError, KeyError) as exc:
        raise ConfigurationError(f"cannot read inputs: {exc}") from exc
    rp, mp, vec = effective_params(cfg, inputs.gt)
    clock = _Clock()

    plan = clock.run("plan", build_tile_plan, inputs.width, inputs.height,
                     cfg.tile_size, cfg.overlap)
    if isinstance(inputs.provider, FilePredictionProvider):
        inputs.provider.check_plan(plan)

    def segment(i):
        pixels = inputs.image.window(plan[i]) if inputs.image is not None else None
        try:
            return segment_tile(inputs.provider, plan, i, pixels)
        except TileError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=workers) as pool:
        seg = clock.run("segment", lambda: list(pool.map(segment, range(len(plan)))))
        failed = [{"tile_index": r.tile_index, "error": str(r)} for r in seg if isinstance(r, TileError)]
        sets = [r for r in seg if isinstance(r, PredictionSet)]
        refined = clock.run("refine", lambda: list(pool.map(
            lambda s: _refine_tile(s, inputs.masks, rp), sets)))
    for f in failed:
        log.warning("%s", f["error"])

    instances = [inst for kept, _ in refined for inst in kept]
    rejected = [r for _, rej in refined for r in rej]

    t_unify = time.perf_counter()
    ordered = order_by_area(instances)
    unified = resolve_overlaps(ordered, mp)
    raster = mosaic(unified, (inputs.width, inputs.height), inputs.gt, rp.connectivity)
    n_mosaic = len(raster.id_areas)
    raster = remove_small_labels(raster, mp.min_mosaic_area_px)
    raster = compact_labels(raster)
    clock.stages["unify"] = time.perf_counter() - t_unify

    t_vec = time.perf_counter()
    traced = trace_labels(raster)
    polys = simplify_coverage(traced, raster, vec["tolerance_m"])
    polys, clean_report = validate_and_clean(polys, vec["min_area_ha"], vec["min_hole_ha"])
    clock.stages["vectorize"] = time.perf_counter() - t_vec

    t_write = time.perf_counter()
    out_dir.mkdir(parents=True, exist_ok=True)
    crs = inputs.gt.crs_epsg
    write_geojson(polys, out_dir / OUTPUT_FILES["geojson"], crs)
    write_bundle(raster.grid, out_dir / OUTPUT_FILES["labels"])
    outputs = {"geojson": OUTPUT_FILES["geojson"], "labels": OUTPUT_FILES["labels"] + ".bin",
               "validation": OUTPUT_FILES["validation"]}
    if cfg.persist_predictions:
        dump_predictions(sets, out_dir / OUTPUT_FILES["predictions"], cfg.tile_size, cfg.overlap)
        outputs["predictions"] = OUTPUT_FILES["predictions"]
    reasons: dict[str, int] = {}
    for r in rejected:
        reasons[r["reason"]] = reasons.get(r["reason"], 0) + 1
    report = {
        "refine": {"rejected": rejected, "rejected_by_reason": dict(sorted(reasons.items()))},
        "vectorize": clean_report,
        "topology": "ok",
        "failed_tiles": failed,
    }
    _dump_json(report, out_dir / OUTPUT_FILES["validation"])
    clock.stages["write"] = time.perf_counter() - t_write

    uv = clock.stages["unify"] + clock.stages["vectorize"]
    n_px = inputs.width * inputs.height
    timing = {f"{k}_s": round(v, 6) for k, v in clock.stages.items()}
    timing["total_s"] = round(sum(clock.stages.values()), 6)
    timing["unify_vectorize_pixels_per_s"] = round(n_px / uv, 1) if uv > 0 else None
    timing["workers"] = workers
    manifest = {
        "config_hash": cfg.config_hash(),
        "extent": [inputs.width, inputs.height],
        "crs_epsg": crs,
        "resolution_m": inputs.gt.resolution,
        "tile_count": len(plan),
        "failed_tiles": [f["tile_index"] for f in failed],
        "counts": {
            "predictions": sum(len(s) for s in sets),
            "refined": len(instances),
            "rejected": len(rejected),
            "unified": len(unified),
            "mosaic_labels": n_mosaic,
            "labels": len(raster.id_areas),
            "slivers_dropped": sum(1 for r in clean_report if r["action"] == "dropped"),
        },
        "effective_params": {
            "refine": dataclasses.asdict(rp),
            "merge": dataclasses.asdict(mp),
            "vectorize": vec,
        },
        "field_count": len(polys),
        "total_area_ha": round(float(sum(p.area_ha for p in polys)), 6),
        "outputs": outputs,
        "timing": timing,
    }
    _dump_json(manifest, out_dir / OUTPUT_FILES["manifest"])
    return manifest


def strip_timing(manifest: dict) -> dict:
    """Manifest without the wall-clock section, for reproducibility checks."""
    return {k: v for k, v in manifest.items() if k != "timing"}
