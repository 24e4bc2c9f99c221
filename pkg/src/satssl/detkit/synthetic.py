"""Synthetic detection inventories whose class mix follows the vehicle statistics of a reference split."""

from __future__ import annotations

import numpy as np

from satssl.detkit.boxes import BBox, GroundTruthObject
from satssl.detkit.tiling import VEHICLE_CLASSES, DetectionDataset

# vehicles per class in the reference base split (204 rasters, 115,617 vehicles), vocabulary order
REFERENCE_CLASS_COUNTS = {
    "civilian": 66504,
    "military": 29332,
    "armored": 16148,
    "launcher": 1364,
    "gse": 820,
    "electronics": 698,
    "heavy_equipment": 432,
    "lifting_equipment": 319,
}
REFERENCE_IMAGES = 204


def reference_proportions():
    counts = np.array([REFERENCE_CLASS_COUNTS[c] for c in VEHICLE_CLASSES], dtype=float)
    return counts / counts.sum()


def synthetic_image_counts(
    rng: np.random.Generator,
    num_images: int = REFERENCE_IMAGES,
    mean_objects: float = 115_617 / REFERENCE_IMAGES,
    concentration: float = 20.0,
    dispersion: float = 0.8,
) -> dict[str, np.ndarray]:
    """Per-image class counts: lognormal totals, Dirichlet class mixes around the reference."""
    p = reference_proportions()
    mu = np.log(mean_objects) - dispersion**2 / 2
    totals = np.maximum(1, rng.lognormal(mu, dispersion, num_images).round().astype(int))
    out = {}
    for i, n in enumerate(totals):
        mix = rng.dirichlet(concentration * p + 1e-3)
        out[f"img{i:04d}"] = rng.multinomial(n, mix)
    return out


def synthetic_detection_dataset(
    rng: np.random.Generator,
    num_images: int = 20,
    image_size: tuple[int, int] = (2048, 2048),
    mean_objects: float = 60.0,
    box_size: tuple[float, float] = (8.0, 40.0),
) -> DetectionDataset:
    counts = synthetic_image_counts(rng, num_images, mean_objects)
    w, h = image_size
    objects = []
    sizes = {}
    for image_id, per_class in counts.items():
        sizes[image_id] = (w, h)
        for cls, n in enumerate(per_class):
            for _ in range(int(n)):
                bw, bh = rng.uniform(*box_size, 2)
                x0, y0 = rng.uniform(0, w - bw), rng.uniform(0, h - bh)
                objects.append(GroundTruthObject(BBox(x0, y0, x0 + bw, y0 + bh), cls, image_id))
    return DetectionDataset(sizes, objects, VEHICLE_CLASSES)
