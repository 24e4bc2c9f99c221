"""Experiment configuration: one JSON document per experiment, validated before any compute."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from satssl.augment import AugmentationConfig
from satssl.dataspec import SyntheticSpec
from satssl.detkit.metrics import DEFAULT_THRESHOLDS
from satssl.detkit.tiling import TileSpec
from satssl.mocotp.config import ContrastiveConfig
from satssl.probe import FRACTIONS, ProbeConfig


class ConfigError(ValueError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage, derived from the experiment's root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


@dataclass
class DatasetSection:
    manifest: str | None = None
    val_manifest: str | None = None
    image_root: str | None = None
    synthetic: SyntheticSpec | None = None
    val_synthetic: SyntheticSpec | None = None


@dataclass
class DetkitSection:
    tile: TileSpec = field(default_factory=TileSpec)
    keep_ratio: float = 0.2
    min_area_fraction: float = 0.1
    target_fractions: tuple[float, ...] = (0.5, 0.1)
    tolerance: float = 0.03
    sampling_seeds: int = 3
    score_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    iou_threshold: float = 0.0
    selection_threshold: float = 0.15
    class_vocabulary: tuple[str, ...] | None = None


@dataclass
class ProbeSection:
    config: ProbeConfig = field(default_factory=ProbeConfig)
    fractions: tuple[float, ...] = FRACTIONS
    replicates: int = 3
    modes: tuple[str, ...] = ("frozen", "finetune")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    probe: ProbeSection = field(default_factory=ProbeSection)
    detkit: DetkitSection = field(default_factory=DetkitSection)
    deterministic: bool = True
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def to_dict(self):
        ds = self.dataset
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "deterministic": self.deterministic,
            "dataset": {
                "manifest": ds.manifest,
                "val_manifest": ds.val_manifest,
                "image_root": ds.image_root,
                "synthetic": None if ds.synthetic is None else vars(ds.synthetic),
                "val_synthetic": None if ds.val_synthetic is None else vars(ds.val_synthetic),
            },
            "pretrain": {"contrastive": self.contrastive.to_dict(), "augmentation": self.augmentation.to_dict()},
            "probe": {
                "config": self.probe.config.to_dict(),
                "fractions": list(self.probe.fractions),
                "replicates": self.probe.replicates,
                "modes": list(self.probe.modes),
            },
            "detkit": {
                "tile": {"tile_size": self.detkit.tile.tile_size, "overlap": self.detkit.tile.overlap},
                "keep_ratio": self.detkit.keep_ratio,
                "min_area_fraction": self.detkit.min_area_fraction,
                "target_fractions": list(self.detkit.target_fractions),
                "tolerance": self.detkit.tolerance,
                "sampling_seeds": self.detkit.sampling_seeds,
                "score_thresholds": list(self.detkit.score_thresholds),
                "iou_threshold": self.detkit.iou_threshold,
                "selection_threshold": self.detkit.selection_threshold,
                "class_vocabulary": None if self.detkit.class_vocabulary is None else list(self.detkit.class_vocabulary),
            },
        }


_TOP_KEYS = {"seed", "output_dir", "dataset", "pretrain", "probe", "detkit", "deterministic"}


def _section(d, name, allowed):
    sec = d.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return sec


def parse_config(d: dict, base_dir=None) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        ds = _section(d, "dataset", {"manifest", "val_manifest", "image_root", "synthetic", "val_synthetic"})
        dataset = DatasetSection(
            manifest=ds.get("manifest"),
            val_manifest=ds.get("val_manifest"),
            image_root=ds.get("image_root"),
            synthetic=SyntheticSpec(**ds["synthetic"]) if ds.get("synthetic") else None,
            val_synthetic=SyntheticSpec(**ds["val_synthetic"]) if ds.get("val_synthetic") else None,
        )
        pre = _section(d, "pretrain", {"contrastive", "augmentation"})
        contrastive = ContrastiveConfig.from_dict(pre.get("contrastive") or {})
        augmentation = AugmentationConfig.from_dict(pre.get("augmentation") or {})
        pr = _section(d, "probe", {"config", "fractions", "replicates", "modes"})
        probe = ProbeSection(
            config=ProbeConfig.from_dict(pr.get("config") or {}),
            fractions=tuple(float(f) for f in pr.get("fractions", FRACTIONS)),
            replicates=int(pr.get("replicates", 3)),
            modes=tuple(pr.get("modes", ("frozen", "finetune"))),
        )
        dk = _section(
            d,
            "detkit",
            {
                "tile",
                "keep_ratio",
                "min_area_fraction",
                "target_fractions",
                "tolerance",
                "sampling_seeds",
                "score_thresholds",
                "iou_threshold",
                "selection_threshold",
                "class_vocabulary",
            },
        )
        detkit = DetkitSection(
            tile=TileSpec(**(dk.get("tile") or {})),
            keep_ratio=float(dk.get("keep_ratio", 0.2)),
            min_area_fraction=float(dk.get("min_area_fraction", 0.1)),
            target_fractions=tuple(float(f) for f in dk.get("target_fractions", (0.5, 0.1))),
            tolerance=float(dk.get("tolerance", 0.03)),
            sampling_seeds=int(dk.get("sampling_seeds", 3)),
            score_thresholds=tuple(float(t) for t in dk.get("score_thresholds", DEFAULT_THRESHOLDS)),
            iou_threshold=float(dk.get("iou_threshold", 0.0)),
            selection_threshold=float(dk.get("selection_threshold", 0.15)),
            class_vocabulary=tuple(dk["class_vocabulary"]) if dk.get("class_vocabulary") else None,
        )
        cfg = ExperimentConfig(
            seed=int(d.get("seed", 0)),
            output_dir=str(d.get("output_dir", "runs/default")),
            dataset=dataset,
            contrastive=contrastive,
            augmentation=augmentation,
            probe=probe,
            detkit=detkit,
            deterministic=bool(d.get("deterministic", True)),
            base_dir=Path(base_dir) if base_dir is not None else Path.cwd(),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not 0 <= cfg.detkit.keep_ratio <= 1:
        raise ConfigError("detkit.keep_ratio must lie in [0, 1]")
    if any(m not in ("frozen", "finetune") for m in cfg.probe.modes):
        raise ConfigError(f"unknown probe modes {cfg.probe.modes}")
    if cfg.probe.replicates < 1:
        raise ConfigError("probe.replicates must be positive")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(raw, base_dir=path.parent)


def validate_dataset(cfg: ExperimentConfig, need_val=False) -> None:
    ds = cfg.dataset
    if ds.synthetic is None and ds.manifest is None:
        raise ConfigError("dataset needs either 'manifest' or 'synthetic'")
    if ds.synthetic is None and not cfg.resolve(ds.manifest).is_file():
        raise ConfigError(f"manifest {cfg.resolve(ds.manifest)} does not exist")
    if need_val:
        if ds.val_synthetic is None and ds.val_manifest is None:
            raise ConfigError("probing needs 'val_manifest' or 'val_synthetic'")
        if ds.val_synthetic is None and not cfg.resolve(ds.val_manifest).is_file():
            raise ConfigError(f"validation manifest {cfg.resolve(ds.val_manifest)} does not exist")
