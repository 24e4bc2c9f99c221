"""Two-view augmentations: MoCo-v2 style perturbations plus the dihedral group of the square.

Images are ``HxWx3`` arrays.  ``augment_view`` returns float32 in ``[0, 1]``; the dihedral
helpers are pure index permutations and keep the input dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from satssl.dataspec import load_image

cv2.setNumThreads(1)


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    crop_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    output_size: int = 224
    color_jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    color_jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    hflip_prob: float = 0.5
    dihedral_enabled: bool = True

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}")
        for name in ("color_jitter_prob", "grayscale_prob", "blur_prob", "hflip_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.output_size < 16:
            raise ValueError("output_size must be >= 16")
        if any(s < 0 for s in self.color_jitter):
            raise ValueError("color_jitter strengths must be non-negative")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("crop_scale_range", "crop_ratio_range", "color_jitter", "blur_sigma_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        return {
            "crop_scale_range": list(self.crop_scale_range),
            "crop_ratio_range": list(self.crop_ratio_range),
            "output_size": self.output_size,
            "color_jitter": list(self.color_jitter),
            "color_jitter_prob": self.color_jitter_prob,
            "grayscale_prob": self.grayscale_prob,
            "blur_prob": self.blur_prob,
            "blur_sigma_range": list(self.blur_sigma_range),
            "hflip_prob": self.hflip_prob,
            "dihedral_enabled": self.dihedral_enabled,
        }


def crop_only_config(output_size, crop_scale_range=(0.2, 1.0)) -> AugmentationConfig:
    """Random resized crop and nothing else (frozen-probe training)."""
    return AugmentationConfig(
        crop_scale_range=crop_scale_range,
        output_size=output_size,
        color_jitter_prob=0.0,
        grayscale_prob=0.0,
        blur_prob=0.0,
        hflip_prob=0.0,
        dihedral_enabled=False,
    )


# -- dihedral group -------------------------------------------------------------------------


def rot90(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate counter-clockwise by ``k`` quarter turns (exact)."""
    return np.ascontiguousarray(np.rot90(image, k % 4, axes=(0, 1)))


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def dihedral(image: np.ndarray, element: int) -> np.ndarray:
    """Apply D4 element ``element`` in [0, 8): optional horizontal flip, then ``element % 4`` turns."""
    if element // 4 % 2:
        image = hflip(image)
    return rot90(image, element % 4)


def random_dihedral(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return dihedral(image, int(rng.integers(8)))


# -- photometric / geometric ops ------------------------------------------------------------


def to_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return np.clip(image.astype(np.float32, copy=False), 0.0, 1.0)


def resize(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        return image.copy()
    interp = cv2.INTER_AREA if min(h, w) > size else cv2.INTER_LINEAR
    return cv2.resize(image, (size, size), interpolation=interp)


def random_resized_crop_box(height, width, scale, ratio, rng, attempts=10):
    """Pick a crop ``(top, left, h, w)``; falls back to the full image after ``attempts`` misses."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return 0, 0, height, width


def _gray(image):
    return image @ np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _blend(a, b, factor):
    return np.clip(factor * a + (1.0 - factor) * b, 0.0, 1.0)


def _adjust_hue(image, shift):
    hsv = cv2.cvtColor(image, cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + shift * 360.0, 360.0)
    return np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)


def color_jitter(image, strengths, rng):
    """Brightness, contrast, saturation and hue jitter applied in random order."""
    b, c, s, h = strengths
    ops = []
    if b > 0:
        f = rng.uniform(max(0.0, 1 - b), 1 + b)
        ops.append(lambda x, f=f: np.clip(x * f, 0.0, 1.0))
    if c > 0:
        f = rng.uniform(max(0.0, 1 - c), 1 + c)
        ops.append(lambda x, f=f: _blend(x, np.float32(_gray(x).mean()), f))
    if s > 0:
        f = rng.uniform(max(0.0, 1 - s), 1 + s)
        ops.append(lambda x, f=f: _blend(x, _gray(x)[..., None], f))
    if h > 0:
        f = rng.uniform(-h, h)
        ops.append(lambda x, f=f: _adjust_hue(x, f))
    for i in rng.permutation(len(ops)):
        image = ops[i](image).astype(np.float32, copy=False)
    return image


def augment_view(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    img = to_float(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    h, w = img.shape[:2]
    top, left, ch, cw = random_resized_crop_box(h, w, config.crop_scale_range, config.crop_ratio_range, rng)
    img = resize(img[top : top + ch, left : left + cw], config.output_size)
    if rng.uniform() < config.color_jitter_prob:
        img = color_jitter(img, config.color_jitter, rng)
    if rng.uniform() < config.grayscale_prob:
        img = np.repeat(_gray(img)[..., None], 3, axis=2)
    if rng.uniform() < config.blur_prob:
        sigma = rng.uniform(*config.blur_sigma_range)
        img = cv2.GaussianBlur(img, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101)
    if rng.uniform() < config.hflip_prob:
        img = hflip(img)
    if config.dihedral_enabled:
        img = random_dihedral(img, rng)
    return np.clip(img, 0.0, 1.0).astype(np.float32, copy=False)


def make_query_key_views(pair, config: AugmentationConfig, rng: np.random.Generator, images):
    """Augment the query record and its temporal positive with independent random streams."""
    rec_q, rec_k = pair
    img_q = load_image(images, rec_q)
    img_k = load_image(images, rec_k)
    rng_q, rng_k = rng.spawn(2)
    return augment_view(img_q, config, rng_q), augment_view(img_k, config, rng_k)
