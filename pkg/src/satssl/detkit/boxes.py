from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def clip(self, x0, y0, x1, y1) -> "BBox | None":
        """Intersection with the rectangle ``[x0, x1) x [y0, y1)``, or None if it has no area."""
        xmin, ymin = max(self.xmin, x0), max(self.ymin, y0)
        xmax, ymax = min(self.xmax, x1), min(self.ymax, y1)
        if xmax <= xmin or ymax <= ymin:
            return None
        return BBox(xmin, ymin, xmax, ymax)

    def shift(self, dx, dy) -> "BBox":
        return BBox(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)


@dataclass(frozen=True)
class GroundTruthObject:
    box: BBox
    class_id: int
    image_id: str


@dataclass(frozen=True)
class Prediction:
    box: BBox
    class_id: int
    score: float
    image_id: str

    def __post_init__(self):
        if not 0 <= self.score <= 1:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    h = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)
