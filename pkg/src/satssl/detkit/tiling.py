"""Sliding-window tiling of large rasters and positive/negative tile bookkeeping."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from satssl.detkit.boxes import BBox, GroundTruthObject

VEHICLE_CLASSES = (
    "civilian",
    "military",
    "armored",
    "launcher",
    "gse",
    "electronics",
    "heavy_equipment",
    "lifting_equipment",
)


@dataclass(frozen=True)
class TileSpec:
    tile_size: int = 512
    overlap: int = 128

    def __post_init__(self):
        if self.tile_size < 1 or not 0 <= self.overlap < self.tile_size:
            raise ValueError(f"need 0 <= overlap < tile_size, got {self.overlap}, {self.tile_size}")

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap


@dataclass(frozen=True)
class Window:
    x0: int
    y0: int
    x1: int
    y1: int

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class DetectionDataset:
    """Image sizes, ground-truth objects and class vocabulary; boxes are clipped to their image."""

    image_sizes: dict[str, tuple[int, int]]
    objects: list[GroundTruthObject] = field(default_factory=list)
    class_vocabulary: tuple[str, ...] = VEHICLE_CLASSES

    def __post_init__(self):
        n = len(self.class_vocabulary)
        kept = []
        for obj in self.objects:
            if not 0 <= obj.class_id < n:
                raise ValueError(f"class_id {obj.class_id} outside vocabulary of {n}")
            if obj.image_id not in self.image_sizes:
                raise ValueError(f"object references unknown image {obj.image_id!r}")
            w, h = self.image_sizes[obj.image_id]
            box = obj.box.clip(0, 0, w, h)
            if box is not None:
                kept.append(GroundTruthObject(box, obj.class_id, obj.image_id))
        self.objects = kept

    def objects_by_image(self):
        out = defaultdict(list)
        for obj in self.objects:
            out[obj.image_id].append(obj)
        return out

    def class_counts(self) -> dict[str, np.ndarray]:
        counts = {i: np.zeros(len(self.class_vocabulary), dtype=np.int64) for i in self.image_sizes}
        for obj in self.objects:
            counts[obj.image_id][obj.class_id] += 1
        return counts


def _origins(length, tile, stride):
    if length <= tile:
        return [0]
    origins = list(range(0, length - tile + 1, stride))
    if origins[-1] + tile < length:
        origins.append(length - tile)
    return origins


def tile_image(width: int, height: int, spec: TileSpec = TileSpec()) -> list[Window]:
    """Row-major windows; the last window of each axis is snapped back onto the image border."""
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be positive")
    xs = _origins(width, spec.tile_size, spec.stride)
    ys = _origins(height, spec.tile_size, spec.stride)
    tw, th = min(spec.tile_size, width), min(spec.tile_size, height)
    return [Window(x, y, x + tw, y + th) for y in ys for x in xs]


@dataclass
class Tile:
    image_id: str
    window: Window
    objects: list[GroundTruthObject] = field(default_factory=list)
    positive: bool = False


def classify_tiles(dataset: DetectionDataset, windows, min_area_fraction: float = 0.1):
    """Split tiles into positives (some object overlaps with positive area) and negatives.

    ``windows`` maps image_id to its windows.  Each overlapping object is clipped and
    re-expressed in tile coordinates; clipped pieces below ``min_area_fraction`` of the
    original box are not stored with the tile.
    """
    by_image = dataset.objects_by_image()
    positives, negatives = [], []
    for image_id, wins in windows.items():
        objs = by_image.get(image_id, [])
        for win in wins:
            tile = Tile(image_id, win)
            for obj in objs:
                clipped = obj.box.clip(win.x0, win.y0, win.x1, win.y1)
                if clipped is None:
                    continue
                tile.positive = True
                if clipped.area >= min_area_fraction * obj.box.area:
                    tile.objects.append(GroundTruthObject(clipped.shift(-win.x0, -win.y0), obj.class_id, image_id))
            (positives if tile.positive else negatives).append(tile)
    return positives, negatives


def subsample_negative_tiles(negatives, keep_ratio: float, rng: np.random.Generator):
    """Uniformly keep ``round(keep_ratio * n)`` negatives, preserving input order."""
    if not 0 <= keep_ratio <= 1:
        raise ValueError("keep_ratio must lie in [0, 1]")
    n = len(negatives)
    k = int(np.floor(keep_ratio * n + 0.5))
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else []
    return [negatives[i] for i in idx]
