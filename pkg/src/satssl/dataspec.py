"""Temporally grouped imagery: records, manifests, subsampling and a synthetic scene generator.

A manifest groups images by ``location_id``; all images of one location form a
:class:`TemporalGroup`, sorted by acquisition time.  Positive pairs for
contrastive pretraining are drawn inside a group.
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image


class ManifestFormatError(ValueError):
    """A manifest line could not be parsed."""

    def __init__(self, path, lineno, reason):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = str(path)
        self.lineno = lineno


class ManifestValidationError(ValueError):
    pass


class ImageLoadError(OSError):
    def __init__(self, image_id, reason):
        super().__init__(f"cannot load image {image_id!r}: {reason}")
        self.image_id = image_id


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    location_id: str
    timestamp: int
    path: str
    class_label: int | None = None
    width: int = 1
    height: int = 1

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ManifestValidationError(
                f"{self.image_id}: width and height must be >= 1, got {self.width}x{self.height}"
            )


def _time_key(record: ImageRecord):
    return (record.timestamp, record.image_id)


@dataclass(frozen=True)
class TemporalGroup:
    location_id: str
    records: tuple[ImageRecord, ...]

    def __post_init__(self):
        if not self.records:
            raise ManifestValidationError(f"group {self.location_id!r} is empty")
        for r in self.records:
            if r.location_id != self.location_id:
                raise ManifestValidationError(
                    f"record {r.image_id} has location {r.location_id!r}, expected {self.location_id!r}"
                )
        ordered = tuple(sorted(self.records, key=_time_key))
        object.__setattr__(self, "records", ordered)

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class Manifest:
    groups: tuple[TemporalGroup, ...]
    class_vocabulary: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "class_vocabulary", tuple(self.class_vocabulary))
        seen_loc = set()
        seen_img = set()
        n_cls = len(self.class_vocabulary)
        for g in self.groups:
            if g.location_id in seen_loc:
                raise ManifestValidationError(f"duplicate location_id {g.location_id!r}")
            seen_loc.add(g.location_id)
            for r in g.records:
                if r.image_id in seen_img:
                    raise ManifestValidationError(f"duplicate image_id {r.image_id!r}")
                seen_img.add(r.image_id)
                if r.class_label is not None and not 0 <= r.class_label < n_cls:
                    raise ManifestValidationError(
                        f"{r.image_id}: class_label {r.class_label} outside vocabulary of {n_cls}"
                    )

    @classmethod
    def from_records(cls, records, class_vocabulary=()):
        by_loc: dict[str, list[ImageRecord]] = defaultdict(list)
        for r in records:
            by_loc[r.location_id].append(r)
        groups = [TemporalGroup(loc, tuple(rs)) for loc, rs in by_loc.items()]
        return cls(tuple(groups), tuple(class_vocabulary))

    def records(self) -> Iterator[ImageRecord]:
        for g in self.groups:
            yield from g.records

    def __len__(self):
        return sum(len(g) for g in self.groups)

    @property
    def num_classes(self):
        return len(self.class_vocabulary)

    def labels(self):
        return np.array([r.class_label for r in self.records()])


# -- manifest I/O ---------------------------------------------------------------------------


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    lines = [json.dumps({"class_vocabulary": list(manifest.class_vocabulary)})]
    for r in manifest.records():
        lines.append(
            json.dumps(
                {
                    "image_id": r.image_id,
                    "location_id": r.location_id,
                    "timestamp": r.timestamp,
                    "path": r.path,
                    "label": None if r.class_label is None else manifest.class_vocabulary[r.class_label],
                    "width": r.width,
                    "height": r.height,
                }
            )
        )
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


_RECORD_KEYS = ("image_id", "location_id", "timestamp", "path", "label", "width", "height")


def load_manifest(path) -> Manifest:
    """Read a line-delimited manifest.

    The first non-blank line holds ``{"class_vocabulary": [...]}``; every other line is one
    image record.  Labels are class names resolved against the vocabulary.
    """
    path = Path(path)
    vocab = None
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestFormatError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestFormatError(path, lineno, "expected a JSON object")
            if vocab is None:
                if "class_vocabulary" not in obj or not isinstance(obj["class_vocabulary"], list):
                    raise ManifestFormatError(path, lineno, "first line must carry class_vocabulary")
                vocab = [str(c) for c in obj["class_vocabulary"]]
                index = {name: i for i, name in enumerate(vocab)}
                continue
            missing = [k for k in _RECORD_KEYS if k not in obj]
            if missing:
                raise ManifestFormatError(path, lineno, f"missing keys {missing}")
            label = obj["label"]
            if label is None:
                cls_idx = None
            elif label in index:
                cls_idx = index[label]
            else:
                raise ManifestValidationError(f"{path}:{lineno}: unknown class {label!r}")
            try:
                records.append(
                    ImageRecord(
                        image_id=str(obj["image_id"]),
                        location_id=str(obj["location_id"]),
                        timestamp=int(obj["timestamp"]),
                        path=str(obj["path"]),
                        class_label=cls_idx,
                        width=int(obj["width"]),
                        height=int(obj["height"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ManifestValidationError):
                    raise
                raise ManifestFormatError(path, lineno, str(exc)) from None
    if vocab is None:
        raise ManifestFormatError(path, 1, "empty manifest")
    return Manifest.from_records(records, vocab)


class DiskImages(Mapping):
    """Lazy ``image_id -> HxWx3 uint8`` mapping backed by the manifest paths."""

    def __init__(self, manifest: Manifest, root=None, cache=True):
        self.root = Path(root) if root is not None else None
        self._paths = {r.image_id: r.path for r in manifest.records()}
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def __getitem__(self, image_id):
        if self._cache is not None and image_id in self._cache:
            return self._cache[image_id]
        p = Path(self._paths[image_id])
        if self.root is not None and not p.is_absolute():
            p = self.root / p
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            raise ImageLoadError(image_id, exc) from exc
        if self._cache is not None:
            self._cache[image_id] = arr
        return arr

    def __iter__(self):
        return iter(self._paths)

    def __len__(self):
        return len(self._paths)


def load_image(images: Mapping, record: ImageRecord) -> np.ndarray:
    try:
        img = images[record.image_id]
    except KeyError:
        raise ImageLoadError(record.image_id, "not present in image store") from None
    if img is None:
        raise ImageLoadError(record.image_id, "image store returned None")
    return img


# -- sampling -------------------------------------------------------------------------------


def sample_temporal_pair(group: TemporalGroup, rng: np.random.Generator, query: int | None = None):
    """Return ``(query_record, positive_record)`` from one location.

    The positive is drawn uniformly among records acquired at a different time.  A group
    with a single image returns ``(r, r)``, i.e. plain instance discrimination.
    """
    if group is None or len(group.records) == 0:
        raise ValueError("cannot sample a pair from an empty group")
    records = group.records
    if query is None:
        query = int(rng.integers(len(records)))
    q = records[query]
    if len(records) == 1:
        return q, q
    candidates = [i for i, r in enumerate(records) if r.timestamp != q.timestamp]
    if not candidates:
        # every revisit shares the timestamp; fall back to any other image
        candidates = [i for i in range(len(records)) if i != query]
    return q, records[candidates[int(rng.integers(len(candidates)))]]


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def stratified_label_subset(manifest: Manifest, fraction: float, rng: np.random.Generator) -> Manifest:
    """Subsample labelled records per class, keeping at least one record per present class."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    records = list(manifest.records())
    if any(r.class_label is None for r in records):
        raise ValueError("stratified subsampling needs every record labelled")
    if fraction == 1:
        return manifest
    by_class: dict[int, list[ImageRecord]] = defaultdict(list)
    for r in records:
        by_class[r.class_label].append(r)
    keep = set()
    for c in sorted(by_class):
        members = by_class[c]
        n = max(1, _round_half_up(fraction * len(members)))
        idx = rng.choice(len(members), size=n, replace=False)
        keep.update(members[i].image_id for i in idx)
    return filter_manifest(manifest, keep)


def filter_manifest(manifest: Manifest, image_ids) -> Manifest:
    image_ids = set(image_ids)
    groups = []
    for g in manifest.groups:
        kept = tuple(r for r in g.records if r.image_id in image_ids)
        if kept:
            groups.append(TemporalGroup(g.location_id, kept))
    return Manifest(tuple(groups), manifest.class_vocabulary)


# -- synthetic temporal scenes --------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    groups_per_class: int = 30
    views_per_group: int = 4
    image_size: int = 32
    nuisance_strength: float = 0.5
    seed: int = 0
    id_prefix: str = ""

    def __post_init__(self):
        for name in ("num_classes", "groups_per_class", "views_per_group", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not 0 <= self.nuisance_strength <= 1:
            raise ValueError("nuisance_strength must lie in [0, 1]")


SHAPE_NAMES = ("square", "ring", "plus", "triangle", "ell", "tee", "bars", "half_disk")


def _shape_mask(shape, u, v):
    # u: column axis, v: row axis (down), both roughly in [-1, 1]
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    if shape == 0:
        return (au < 0.55) & (av < 0.55)
    if shape == 1:
        return (r > 0.35) & (r < 0.7)
    if shape == 2:
        return ((au < 0.2) & (av < 0.7)) | ((av < 0.2) & (au < 0.7))
    if shape == 3:
        return (v > -0.65) & (v < 0.6) & (au < 0.65 * (v + 0.65) / 1.25)
    if shape == 4:
        return ((u > -0.6) & (u < -0.2) & (av < 0.65)) | ((v > 0.25) & (v < 0.65) & (au < 0.6))
    if shape == 5:
        return ((v > -0.65) & (v < -0.25) & (au < 0.65)) | ((au < 0.2) & (av < 0.65))
    if shape == 6:
        return (au < 0.65) & (((v > -0.6) & (v < -0.25)) | ((v > 0.25) & (v < 0.6)))
    return (r < 0.7) & (v < 0.05)


@dataclass(frozen=True)
class _Location:
    shape: int
    striped: bool
    bg: np.ndarray
    fg: np.ndarray
    scale: float
    texture: np.ndarray = field(repr=False)
    layout: tuple = ()
    offset: tuple = (0.0, 0.0)


def _draw_location(cls, num_classes, size, nuisance, rng):
    bg = rng.uniform(0.15, 0.35) + rng.uniform(-0.08, 0.08, 3)
    fg = rng.uniform(0.65, 0.9) + rng.uniform(-0.08, 0.08, 3)
    tex = rng.normal(0.0, 1.0, (size // 4, size // 4))
    tex = np.kron(tex, np.ones((4, 4)))[:size, :size] * 0.03
    # persistent site structure: buildings and a road, in unit coordinates
    layout = []
    for _ in range(int(rng.integers(2, 5))):
        w, h = rng.uniform(0.12, 0.3, 2)
        x0, y0 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
        layout.append((x0, y0, x0 + w, y0 + h, rng.choice([-1.0, 1.0]) * rng.uniform(0.12, 0.22)))
    pos = rng.uniform(0.05, 0.95)
    if rng.uniform() < 0.5:
        layout.append((0.0, pos, 1.0, pos + 0.07, 0.15))
    else:
        layout.append((pos, 0.0, pos + 0.07, 1.0, 0.15))
    # site-level placement and size of the object, spread out with the nuisance level
    offset = tuple(nuisance * rng.uniform(-0.24, 0.24, 2))
    scale = 1.0 - nuisance * rng.uniform(0.0, 0.6)
    return _Location(
        shape=cls % len(SHAPE_NAMES),
        striped=(cls // len(SHAPE_NAMES)) % 2 == 1,
        bg=bg,
        fg=fg,
        scale=scale,
        texture=tex,
        layout=tuple(layout),
        offset=offset,
    )


def _render(loc: _Location, size, nuisance, rng):
    s = nuisance
    if s > 0:
        shift = rng.uniform(-size / 8, size / 8, 2) * s
        brightness = 1.0 + s * rng.uniform(-0.4, 0.4)
        # seasonal tint shared by ground and object, plus independent drift of each
        tint = s * rng.uniform(-0.3, 0.3, 3)
        bg = loc.bg + tint + s * rng.uniform(-0.1, 0.1, 3)
        fg = loc.fg + tint + s * rng.uniform(-0.1, 0.1, 3)
    else:
        shift = np.zeros(2)
        brightness = 1.0
        bg, fg = loc.bg, loc.fg
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(coords, coords, indexing="ij")
    half = loc.scale * 0.75
    u_s = (u - loc.offset[0] - shift[0] * 2 / size) / half
    v_s = (v - loc.offset[1] - shift[1] * 2 / size) / half
    mask = _shape_mask(loc.shape, u_s, v_s)
    if loc.striped:
        mask &= (np.floor((v_s + 1) * 4) % 2) == 0
    img = np.empty((size, size, 3))
    img[:] = bg
    img += loc.texture[..., None]
    # scene coordinates in [0, 1], shifted with the view
    x = (u + 1) / 2 - shift[0] / size
    y = (v + 1) / 2 - shift[1] / size
    for x0, y0, x1, y1, delta in loc.layout:
        img[(x >= x0) & (x < x1) & (y >= y0) & (y < y1)] += delta
    img[mask] = fg
    if s > 0:
        n_clutter = int(rng.poisson(6 * s))
        for _ in range(n_clutter):
            h, w = rng.integers(max(1, size // 16), max(2, size // 8) + 1, 2)
            y0, x0 = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
            img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.0, 1.0, 3)
        img = img * brightness + rng.normal(0.0, 0.05 * s, img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(spec: SyntheticSpec):
    """Render a labelled temporal dataset.

    Every location carries a class-determining shape drawn in a fixed orientation plus its
    own colours, background texture and site layout.  ``nuisance_strength`` scales both the
    spread of object placement and size across locations and the per-view drift (tint,
    brightness, clutter, position, noise); at 0 all views of a location are identical.  Returns ``(manifest, images)`` with
    ``images`` mapping image_id to an ``HxWx3`` uint8 array.
    """
    ss = np.random.SeedSequence(spec.seed)
    size = spec.image_size
    vocab = tuple(
        SHAPE_NAMES[c % len(SHAPE_NAMES)] + ("" if c < len(SHAPE_NAMES) else f"_{c // len(SHAPE_NAMES)}")
        for c in range(spec.num_classes)
    )
    records = []
    images = {}
    pre = spec.id_prefix
    for c in range(spec.num_classes):
        for g in range(spec.groups_per_class):
            loc_seq = ss.spawn(1)[0]
            loc_rng = np.random.default_rng(loc_seq)
            loc = _draw_location(c, spec.num_classes, size, spec.nuisance_strength, loc_rng)
            loc_id = f"{pre}loc{c:03d}_{g:04d}"
            for t in range(spec.views_per_group):
                view_rng = np.random.default_rng(loc_seq.spawn(1)[0])
                image_id = f"{loc_id}_t{t}"
                images[image_id] = _render(loc, size, spec.nuisance_strength, view_rng)
                records.append(
                    ImageRecord(
                        image_id=image_id,
                        location_id=loc_id,
                        timestamp=1_500_000_000 + t * 86_400 * 30,
                        path=f"images/{image_id}.png",
                        class_label=c,
                        width=size,
                        height=size,
                    )
                )
    return Manifest.from_records(records, vocab), images


def write_images(images: Mapping, manifest: Manifest, root) -> None:
    root = Path(root)
    for r in manifest.records():
        p = root / r.path
        p.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(images[r.image_id], dtype=np.uint8)).save(p, format="PNG")
