"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 invalid input data,
3 topology error in the produced polygons.

For ``run``, settings come from (highest precedence first) command-line
flags, the ``--config`` JSON document, then built-in defaults. The default
worker count is read from ``FIELDFLOW_WORKERS``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import metrics
from .pipeline import WORKERS_ENV, RunConfig, run_pipeline
from .raster import (DEFAULT_OVERLAP, DEFAULT_TILE_SIZE, ConfigurationError, GeoTransform,
                     build_tile_plan, read_bundle, write_bundle)
from .segmenter import PredictionValidationError, dump_predictions, load_prediction_file
from .unify import FieldLabelRaster
from .vectorize import (TopologyError, rasterize_polygons, read_geojson, vectorize_raster,
                        write_geojson)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TOPOLOGY = 0, 1, 2, 3

log = logging.getLogger("fieldflow")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _write_table(rows: Sequence[dict], out=None) -> None:
    out = out or sys.stdout
    if not rows:
        return
    w = csv.DictWriter(out, fieldnames=list(rows[0]), delimiter="\t", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def _dump(doc: dict, path: Optional[str]) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    from .synth import generate_landscape, perturb_oracle, render_image

    res = args.resolution
    gt = GeoTransform(0.0, args.height * res, res, res, args.epsg)
    land = generate_landscape(args.seed, args.width, args.height, args.n_sites,
                              args.non_field_fraction, gt, args.border_px)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_bundle(render_image(land), out / "image")
    write_bundle(land.label_raster.grid, out / "gt_labels")
    write_geojson(land.gt_polygons, out / "gt.geojson", gt.crs_epsg)
    plan = build_tile_plan(args.width, args.height, args.tile_size, args.overlap)
    sets = perturb_oracle(land, plan, args.merge_prob, args.drop_prob, args.jitter_px, args.seed)
    dump_predictions(sets, out / "predictions.json", args.tile_size, args.overlap)
    config = {
        "provider": "file:predictions.json",
        "image": "image",
        "tile_size": args.tile_size,
        "overlap": args.overlap,
        "seed": args.seed,
        "output_dir": "run",
    }
    _dump(config, str(out / "config.json"))
    print(f"fields\t{land.n_fields}\ntiles\t{len(plan)}\n"
          f"predictions\t{sum(len(s) for s in sets)}\nout\t{out}")
    return EXIT_OK


# ---------------------------------------------------------------- plan

def cmd_plan(args) -> int:
    if args.image:
        grid = read_bundle(args.image)
        width, height = grid.width, grid.height
    elif args.width and args.height:
        width, height = args.width, args.height
    else:
        raise ConfigurationError("plan needs --image or both --width and --height")
    plan = build_tile_plan(width, height, args.tile_size, args.overlap)
    _write_table([{"tile_index": i, "x0": w.x0, "y0": w.y0, "w": w.w, "h": w.h}
                  for i, w in enumerate(plan)])
    return EXIT_OK


# ---------------------------------------------------------------- run

def _run_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    elif args.provider:
        cfg = RunConfig(provider=args.provider)
    else:
        raise ConfigurationError("run needs --config or --provider")
    cfg = cfg.with_overrides(
        provider=args.provider, image=args.image, quality_mask=args.quality_mask,
        context_mask=args.context_mask, expand_radius=args.expand_radius,
        tile_size=args.tile_size, overlap=args.overlap, output_dir=args.output_dir,
        workers=args.workers, seed=args.seed)
    if args.no_refine:
        cfg.refine = {**cfg.refine, "morphology": False}
    for section, key, val in (("vectorize", "tolerance_m", args.tolerance_m),
                              ("vectorize", "min_area_ha", args.min_area_ha),
                              ("refine", "min_area_px", args.min_area_px)):
        if val is not None:
            getattr(cfg, section)[key] = val
    if args.no_persist_predictions:
        cfg.persist_predictions = False
    return cfg


def cmd_run(args) -> int:
    cfg = _run_config(args)
    manifest = run_pipeline(cfg)
    if manifest["failed_tiles"]:
        print(f"warning: {len(manifest['failed_tiles'])} tile(s) failed: "
              f"{manifest['failed_tiles']}", file=sys.stderr)
    _write_table([{"field_count": manifest["field_count"],
                   "total_area_ha": manifest["total_area_ha"],
                   "tile_count": manifest["tile_count"],
                   "failed_tiles": len(manifest["failed_tiles"]),
                   "total_s": manifest["timing"]["total_s"],
                   "output_dir": cfg.output_dir}])
    return EXIT_OK


# ---------------------------------------------------------------- vectorize

def cmd_vectorize(args) -> int:
    grid = read_bundle(args.labels)
    raster = FieldLabelRaster.from_labels(grid.values, grid.geotransform)
    polys, report = vectorize_raster(raster, args.tolerance_m, args.min_area_ha, args.min_hole_ha)
    write_geojson(polys, args.out, grid.geotransform.crs_epsg)
    if args.report:
        _dump({"vectorize": report, "topology": "ok"}, args.report)
    print(f"fields\t{len(polys)}\nout\t{args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _tile_triples(pred_path: str, gt_labels: np.ndarray):
    sets, _, _ = load_prediction_file(pred_path)
    h, w = gt_labels.shape
    tiles = []
    for s in sets:
        win = s.window
        if win.x1 > w or win.y1 > h:
            raise PredictionValidationError("window lies outside the ground-truth extent",
                                            s.tile_index)
        sub = gt_labels[win.slices]
        n = int(sub.max()) if sub.size else 0
        gts = [sub == i for i, sl in enumerate(ndimage.find_objects(sub, max_label=n), start=1)
               if sl is not None] if n else []
        tiles.append(([p.mask for p in s.predictions], [p.score for p in s.predictions], gts))
    return tiles


def cmd_eval(args) -> int:
    gt_grid = read_bundle(args.gt)
    gt_labels = gt_grid.values
    thresholds = metrics.MAP5095
    if args.predictions:
        matches, n_pred = metrics.tile_matches(_tile_triples(args.predictions, gt_labels),
                                               thresholds)
    else:
        if args.polygons:
            polys, _ = read_geojson(args.polygons)
            pred = rasterize_polygons(polys, gt_grid.geotransform, gt_grid.width, gt_grid.height)
        else:
            grid = read_bundle(args.labels)
            if grid.values.shape != gt_labels.shape:
                raise PredictionValidationError("label raster and ground truth differ in size")
            pred = grid.values
        matches, n_pred = metrics.label_raster_matches(pred, gt_labels, None, thresholds)
    report = metrics.summarize(matches, n_pred, args.ap_mode)
    _dump(report, args.out)
    _write_table([{"tau": f"{r['tau']:.2f}", "ap": f"{r['ap']:.6f}", "tp": r["tp"],
                   "fp": r["fp"], "fn": r["fn"]} for r in report["per_threshold"]])
    print(f"# map50={report['map50']:.6f} map5095={report['map5095']:.6f} "
          f"n_gt={report['n_gt']} n_pred={report['n_pred']}")
    if args.figure:
        from .plotting import plot_pr_curves
        plot_pr_curves(matches, args.figure)
    return EXIT_OK


# ---------------------------------------------------------------- stats

def cmd_stats(args) -> int:
    polys, _ = read_geojson(args.geojson)
    stats = metrics.size_stats([p.area_ha for p in polys], floor_ha=args.floor_ha)
    _dump(stats, args.out)
    edges = stats["edges_ha"]
    _write_table([{"lo_ha": f"{a:g}", "hi_ha": f"{b:g}", "count": c}
                  for a, b, c in zip(edges[:-1], edges[1:], stats["counts"])])
    print(f"# total_fields={stats['total_fields']} total_area_ha={stats['total_area_ha']:.6f} "
          f"above_floor={stats['fields_above_floor']}")
    if args.figure:
        from .plotting import plot_size_histogram
        plot_size_histogram(stats, args.figure)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fieldflow", description="Field-boundary delineation from instance masks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthetic landscape plus oracle predictions")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--n-sites", type=int, default=40)
    s.add_argument("--non-field-fraction", type=float, default=0.0)
    s.add_argument("--resolution", type=float, default=10.0, help="pixel size in metres")
    s.add_argument("--epsg", type=int, default=0)
    s.add_argument("--border-px", type=int, default=1)
    s.add_argument("--merge-prob", type=float, default=0.0)
    s.add_argument("--drop-prob", type=float, default=0.0)
    s.add_argument("--jitter-px", type=int, default=0)
    s.add_argument("--tile-size", type=int, default=DEFAULT_TILE_SIZE)
    s.add_argument("--overlap", type=int, default=DEFAULT_OVERLAP)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("plan", help="print the tile plan as tab-separated rows")
    s.add_argument("--image", help="raster bundle giving the extent")
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--tile-size", type=int, default=DEFAULT_TILE_SIZE)
    s.add_argument("--overlap", type=int, default=DEFAULT_OVERLAP)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("run", help="full pipeline")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--provider", help="file:<predictions.json> or synth:key=value,...")
    s.add_argument("--image")
    s.add_argument("--quality-mask")
    s.add_argument("--context-mask")
    s.add_argument("--expand-radius", type=int)
    s.add_argument("--tile-size", type=int)
    s.add_argument("--overlap", type=int)
    s.add_argument("--output-dir")
    s.add_argument("--workers", type=int, help=f"default from ${WORKERS_ENV}, else 1")
    s.add_argument("--seed", type=int)
    s.add_argument("--tolerance-m", type=float)
    s.add_argument("--min-area-ha", type=float)
    s.add_argument("--min-area-px", type=int)
    s.add_argument("--no-refine", action="store_true", help="skip the morphological refinement")
    s.add_argument("--no-persist-predictions", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("vectorize", help="label raster bundle to GeoJSON")
    s.add_argument("labels")
    s.add_argument("--out", required=True)
    s.add_argument("--tolerance-m", type=float)
    s.add_argument("--min-area-ha", type=float, default=0.0)
    s.add_argument("--min-hole-ha", type=float)
    s.add_argument("--report", help="write the cleaning report here")
    s.set_defaults(func=cmd_vectorize)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--gt", required=True, help="ground-truth label raster bundle")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--predictions", help="prediction file (per-tile evaluation)")
    src.add_argument("--polygons", help="GeoJSON output of a run")
    src.add_argument("--labels", help="label raster bundle")
    s.add_argument("--ap-mode", choices=("all_point", "coco101"), default="all_point")
    s.add_argument("--out", help="report JSON path")
    s.add_argument("--figure", help="precision-recall figure path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="field size histogram of a GeoJSON")
    s.add_argument("geojson")
    s.add_argument("--floor-ha", type=float, default=metrics.SIZE_FLOOR_HA)
    s.add_argument("--out", help="report JSON path")
    s.add_argument("--figure", help="histogram figure path")
    s.set_defaults(func=cmd_stats)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TopologyError as exc:
        print(f"topology error: {exc}", file=sys.stderr)
        return EXIT_TOPOLOGY
    except (PredictionValidationError, metrics.UndefinedAPError, ValueError) as exc:
        print(f"invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
