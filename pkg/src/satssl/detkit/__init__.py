"""Detection-side dataset engineering and evaluation."""

from satssl.detkit.boxes import BBox, GroundTruthObject, Prediction, intersection_area, iou
from satssl.detkit.metrics import (
    DEFAULT_THRESHOLDS,
    PRPoint,
    average_precision,
    count_matches,
    evaluate_detections,
    f1_sweep,
    match_detections,
    mean_average_precision,
    pr_curve,
)
from satssl.detkit.sampling import MatriochkaResult, matriochka_sample
from satssl.detkit.tiling import (
    VEHICLE_CLASSES,
    DetectionDataset,
    Tile,
    TileSpec,
    Window,
    classify_tiles,
    subsample_negative_tiles,
    tile_image,
)

__all__ = [
    "BBox",
    "DEFAULT_THRESHOLDS",
    "DetectionDataset",
    "GroundTruthObject",
    "MatriochkaResult",
    "PRPoint",
    "Prediction",
    "Tile",
    "TileSpec",
    "VEHICLE_CLASSES",
    "Window",
    "average_precision",
    "classify_tiles",
    "count_matches",
    "evaluate_detections",
    "f1_sweep",
    "intersection_area",
    "iou",
    "match_detections",
    "matriochka_sample",
    "mean_average_precision",
    "pr_curve",
    "subsample_negative_tiles",
    "tile_image",
]
