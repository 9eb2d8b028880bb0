"""Field-boundary delineation: tiled instance masks in, one clean vector layer out."""

from .metrics import average_precision, boundary_iou, map_at, mask_iou, match_predictions
from .pipeline import RunConfig, run_pipeline
from .raster import ConfigurationError, GeoGrid, GeoTransform, Window, build_tile_plan
from .refine import RefineParams, min_area_ha_for_resolution, morphological_refine
from .unify import MergeParams, mosaic, resolve_overlaps
from .vectorize import FieldPolygon, TopologyError, vectorize_raster

__all__ = [
    "average_precision",
    "boundary_iou",
    "map_at",
    "mask_iou",
    "match_predictions",
    "RunConfig",
    "run_pipeline",
    "ConfigurationError",
    "GeoGrid",
    "GeoTransform",
    "Window",
    "build_tile_plan",
    "RefineParams",
    "min_area_ha_for_resolution",
    "morphological_refine",
    "MergeParams",
    "mosaic",
    "resolve_overlaps",
    "FieldPolygon",
    "TopologyError",
    "vectorize_raster",
]

__version__ = "0.1.0"
