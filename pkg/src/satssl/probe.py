"""Downstream classification transfer: frozen linear probing and finetuning under label budgets."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from satssl.augment import AugmentationConfig, augment_view, crop_only_config, resize, to_float
from satssl.dataspec import Manifest, load_image, stratified_label_subset
from satssl.mocotp.encoder import EncoderState, to_tensor

log = logging.getLogger(__name__)

FRACTIONS = (0.01, 0.10, 1.00)


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "frozen"
    head_lr: float = 1.0
    backbone_lr: float = 3e-4
    weight_decay: float | None = None
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    label_fraction: float = 1.0
    output_size: int = 32
    crop_scale_range: tuple[float, float] = (0.5, 1.0)
    # "backbone": pooled backbone features; "embedding": L2-normalised projection output
    feature_source: str = "backbone"

    def __post_init__(self):
        if self.mode not in ("frozen", "finetune"):
            raise ValueError(f"mode must be 'frozen' or 'finetune', got {self.mode!r}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.head_lr < 0 or self.backbone_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.feature_source not in ("backbone", "embedding"):
            raise ValueError(f"feature_source must be 'backbone' or 'embedding', got {self.feature_source!r}")

    @property
    def effective_weight_decay(self):
        if self.weight_decay is not None:
            return self.weight_decay
        return 0.0 if self.mode == "frozen" else 1e-4

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "crop_scale_range" in d:
            d["crop_scale_range"] = tuple(d["crop_scale_range"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["crop_scale_range"] = list(self.crop_scale_range)
        return d


class ClassifierHead(nn.Module):
    """Linear layer on features standardized with statistics frozen at construction."""

    def __init__(self, feature_mean: torch.Tensor, feature_std: torch.Tensor, num_classes: int):
        super().__init__()
        d = feature_mean.shape[0]
        self.register_buffer("feature_mean", feature_mean.clone())
        self.register_buffer("feature_std", feature_std.clone())
        self.linear = nn.Linear(d, num_classes)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    @property
    def weight(self):
        return self.linear.weight

    @property
    def bias(self):
        return self.linear.bias

    def forward(self, feats):
        return self.linear((feats - self.feature_mean) / self.feature_std)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_top1_accuracy: float
    val_macro_f1: float


@dataclass
class ProbeResult:
    head: ClassifierHead
    history: list[EpochRecord]
    backbone: nn.Module | None = None

    @property
    def best(self) -> EpochRecord:
        return select_best_epoch(self.history)


# -- metrics --------------------------------------------------------------------------------


def macro_f1(predictions, labels, num_classes: int) -> float:
    """Unweighted mean of one-vs-rest F1 over all classes; classes never seen nor predicted score 0."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    scores = []
    for c in range(num_classes):
        tp = np.sum((predictions == c) & (labels == c))
        fp = np.sum((predictions == c) & (labels != c))
        fn = np.sum((predictions != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def select_best_epoch(history) -> EpochRecord:
    """Highest validation top-1 accuracy, earliest epoch on ties."""
    if not history:
        raise ValueError("empty training history")
    best = history[0]
    for rec in history[1:]:
        if rec.val_top1_accuracy > best.val_top1_accuracy:
            best = rec
    return best


# -- feature plumbing -----------------------------------------------------------------------


def _labels(manifest: Manifest):
    recs = list(manifest.records())
    if any(r.class_label is None for r in recs):
        raise ValueError("probing needs a fully labelled manifest")
    return recs, torch.as_tensor([r.class_label for r in recs], dtype=torch.long)


def _plain_views(recs, images, size):
    return np.stack([resize(to_float(load_image(images, r)), size) for r in recs])


def _augmented_views(recs, images, aug_cfg, rng):
    return np.stack([augment_view(load_image(images, r), aug_cfg, rng) for r in recs])


class _Embedding(nn.Module):
    def __init__(self, encoder):
        super().__init__()
        self.encoder = encoder

    def forward(self, x):
        return F.normalize(self.encoder(x), dim=1)


def feature_module(state: EncoderState, source: str = "backbone") -> nn.Module:
    """The network whose output the classifier head sees."""
    if source == "backbone":
        return state.query.backbone
    if source == "embedding":
        return _Embedding(state.query)
    raise ValueError(f"unknown feature source {source!r}")


def extract_features(backbone: nn.Module, views, chunk=256) -> torch.Tensor:
    dtype = next(backbone.parameters()).dtype
    out = []
    for i in range(0, len(views), chunk):
        out.append(backbone(to_tensor(views[i : i + chunk], dtype=dtype)))
    return torch.cat(out)


def predict(backbone: nn.Module, head: ClassifierHead, manifest: Manifest, images, size: int, transform=None):
    """Class predictions and labels for every record; ``transform`` maps each resized view."""
    recs, labels = _labels(manifest)
    views = _plain_views(recs, images, size)
    if transform is not None:
        views = np.stack([transform(v) for v in views])
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        logits = head(extract_features(backbone, views))
    backbone.train(was_training)
    return logits.argmax(1).numpy(), labels.numpy()


def accuracy(preds, labels) -> float:
    return float(np.mean(np.asarray(preds) == np.asarray(labels))) if len(labels) else 0.0


def _feature_stats(feats):
    mean = feats.mean(0)
    std = feats.std(0, unbiased=False).clamp_min(1e-6)
    return mean, std


def _lr_at(step, total, base):
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


# -- protocols ------------------------------------------------------------------------------


def _subset(train_manifest, cfg, rng):
    if cfg.label_fraction < 1:
        return stratified_label_subset(train_manifest, cfg.label_fraction, rng)
    return train_manifest


def linear_probe(
    state: EncoderState,
    train_manifest: Manifest,
    val_manifest: Manifest,
    cfg: ProbeConfig,
    images,
    rng: np.random.Generator,
) -> ProbeResult:
    """Train a linear classifier on frozen encoder features.

    The training images get random resized crops only.  The returned head holds the weights
    of the epoch with the best validation accuracy; ``result.backbone`` is the (untouched)
    feature network it expects.
    """
    if cfg.mode != "frozen":
        raise ValueError("linear_probe requires mode='frozen'")
    backbone = feature_module(state, cfg.feature_source)
    train_manifest = _subset(train_manifest, cfg, rng)
    train_recs, y_train = _labels(train_manifest)
    val_recs, y_val = _labels(val_manifest)
    num_classes = train_manifest.num_classes
    aug = crop_only_config(cfg.output_size, cfg.crop_scale_range)

    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            mean, std = _feature_stats(extract_features(backbone, _plain_views(train_recs, images, cfg.output_size)))
            val_feats = extract_features(backbone, _plain_views(val_recs, images, cfg.output_size))
        head = ClassifierHead(mean, std, num_classes).to(mean.dtype)
        opt = torch.optim.SGD(
            head.parameters(), lr=cfg.head_lr, momentum=cfg.momentum, weight_decay=cfg.effective_weight_decay
        )
        n = len(train_recs)
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        total = steps_per_epoch * cfg.epochs
        step = 0
        history = []
        best_acc, best_state = -1.0, None
        for epoch in range(cfg.epochs):
            with torch.no_grad():
                feats = extract_features(backbone, _augmented_views(train_recs, images, aug, rng))
            order = torch.from_numpy(rng.permutation(n))
            losses = []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                for g in opt.param_groups:
                    g["lr"] = _lr_at(step, total, cfg.head_lr)
                loss = F.cross_entropy(head(feats[idx]), y_train[idx])
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(loss.item())
                step += 1
            with torch.no_grad():
                preds = head(val_feats).argmax(1).numpy()
            rec = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_top1_accuracy=accuracy(preds, y_val.numpy()),
                val_macro_f1=macro_f1(preds, y_val.numpy(), num_classes),
            )
            history.append(rec)
            if rec.val_top1_accuracy > best_acc:
                best_acc, best_state = rec.val_top1_accuracy, copy.deepcopy(head.state_dict())
    finally:
        backbone.train(was_training)
    head.load_state_dict(best_state)
    return ProbeResult(head=head, history=history, backbone=backbone)


def finetune(
    state: EncoderState,
    train_manifest: Manifest,
    val_manifest: Manifest,
    cfg: ProbeConfig,
    images,
    rng: np.random.Generator,
    aug_cfg: AugmentationConfig | None = None,
) -> ProbeResult:
    """Train backbone and head jointly, two parameter groups, pretraining augmentations.

    The input ``state`` is left untouched; the returned backbone is a trained copy holding
    the best-validation-epoch weights.
    """
    if cfg.mode != "finetune":
        raise ValueError("finetune requires mode='finetune'")
    if aug_cfg is None:
        aug_cfg = AugmentationConfig(output_size=cfg.output_size)
    backbone = copy.deepcopy(feature_module(state, cfg.feature_source))
    for p in backbone.parameters():
        p.requires_grad_(True)
    train_manifest = _subset(train_manifest, cfg, rng)
    train_recs, y_train = _labels(train_manifest)
    val_recs, y_val = _labels(val_manifest)
    num_classes = train_manifest.num_classes

    backbone.eval()
    with torch.no_grad():
        mean, std = _feature_stats(extract_features(backbone, _plain_views(train_recs, images, cfg.output_size)))
    val_views = _plain_views(val_recs, images, cfg.output_size)
    head = ClassifierHead(mean, std, num_classes).to(mean.dtype)
    wd = cfg.effective_weight_decay
    opt = torch.optim.SGD(
        [
            {"params": list(backbone.parameters()), "lr": cfg.backbone_lr, "base_lr": cfg.backbone_lr},
            {"params": list(head.parameters()), "lr": cfg.head_lr, "base_lr": cfg.head_lr},
        ],
        lr=cfg.head_lr,
        momentum=cfg.momentum,
        weight_decay=wd,
    )
    n = len(train_recs)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = 0
    history = []
    best_acc, best_state = -1.0, None
    for epoch in range(cfg.epochs):
        backbone.train()
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            views = _augmented_views([train_recs[i] for i in idx], images, aug_cfg, rng)
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, total, g["base_lr"])
            feats = backbone(to_tensor(views, dtype=mean.dtype))
            loss = F.cross_entropy(head(feats), y_train[torch.from_numpy(idx)])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        backbone.eval()
        with torch.no_grad():
            preds = head(extract_features(backbone, val_views)).argmax(1).numpy()
        rec = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_top1_accuracy=accuracy(preds, y_val.numpy()),
            val_macro_f1=macro_f1(preds, y_val.numpy(), num_classes),
        )
        history.append(rec)
        if rec.val_top1_accuracy > best_acc:
            best_acc = rec.val_top1_accuracy
            best_state = (copy.deepcopy(backbone.state_dict()), copy.deepcopy(head.state_dict()))
    backbone.load_state_dict(best_state[0])
    head.load_state_dict(best_state[1])
    return ProbeResult(head=head, history=history, backbone=backbone)


# -- label-efficiency suite -----------------------------------------------------------------


@dataclass
class SuiteCell:
    fraction: float
    mode: str
    per_replicate: list[float] = field(default_factory=list)
    per_replicate_accuracy: list[float] = field(default_factory=list)

    @property
    def mean_f1(self):
        return float(np.mean(self.per_replicate))

    @property
    def sd_f1(self):
        return sample_sd(self.per_replicate)

    @property
    def mean_accuracy(self):
        return float(np.mean(self.per_replicate_accuracy))

    def to_dict(self):
        return {
            "fraction": self.fraction,
            "mode": self.mode,
            "mean_f1": self.mean_f1,
            "sd_f1": self.sd_f1,
            "mean_accuracy": self.mean_accuracy,
            "per_replicate": list(self.per_replicate),
            "per_replicate_accuracy": list(self.per_replicate_accuracy),
        }


def sample_sd(values) -> float:
    """Standard deviation with Bessel's correction; 0 for fewer than two values."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def run_label_efficiency_suite(
    state: EncoderState,
    train_manifest: Manifest,
    val_manifest: Manifest,
    images,
    rng: np.random.Generator,
    fractions=FRACTIONS,
    replicates: int = 3,
    modes=("frozen", "finetune"),
    base_cfg: ProbeConfig | None = None,
    aug_cfg: AugmentationConfig | None = None,
) -> dict:
    """Best-epoch macro-F1 for every (fraction, mode) cell, ``replicates`` subsets per fraction < 1."""
    base_cfg = base_cfg or ProbeConfig()
    cells = []
    for fraction in fractions:
        reps = 1 if fraction >= 1 else replicates
        subsets = [
            stratified_label_subset(train_manifest, fraction, rng) if fraction < 1 else train_manifest
            for _ in range(reps)
        ]
        for mode in modes:
            cfg = ProbeConfig.from_dict({**base_cfg.to_dict(), "mode": mode, "label_fraction": 1.0})
            cell = SuiteCell(fraction=float(fraction), mode=mode)
            for r, subset in enumerate(subsets):
                cell_rng = np.random.default_rng(rng.integers(2**63))
                if mode == "frozen":
                    res = linear_probe(state, subset, val_manifest, cfg, images, cell_rng)
                else:
                    res = finetune(state, subset, val_manifest, cfg, images, cell_rng, aug_cfg)
                best = res.best
                cell.per_replicate.append(best.val_macro_f1)
                cell.per_replicate_accuracy.append(best.val_top1_accuracy)
                log.info("fraction %.2f %s replicate %d: f1 %.4f", fraction, mode, r, best.val_macro_f1)
            cells.append(cell)
    return {
        "fractions": [float(f) for f in fractions],
        "modes": list(modes),
        "replicates": replicates,
        "cells": [c.to_dict() for c in cells],
    }


def render_table(report: dict) -> str:
    """Text table, one row per mode and one column per label fraction, ``mean (sd)`` in percent."""
    fractions = report["fractions"]
    cells = {(c["fraction"], c["mode"]): c for c in report["cells"]}
    header = ["mode"] + [f"{f * 100:g}% labels" for f in fractions]
    rows = [header]
    for mode in report["modes"]:
        row = [mode]
        for f in fractions:
            c = cells[(f, mode)]
            if len(c["per_replicate"]) > 1:
                row.append(f"{c['mean_f1'] * 100:.2f} ({c['sd_f1'] * 100:.2f})")
            else:
                row.append(f"{c['mean_f1'] * 100:.2f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)
