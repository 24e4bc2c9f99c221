"""Command-line entry point: ``satssl <command> --config experiment.json``.

Exit status is 0 on success, 1 when the config or an input file is invalid (reported before
any compute) and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from satssl.config import ConfigError, ExperimentConfig, load_config, parse_config, substream, validate_dataset
from satssl.dataspec import (
    DiskImages,
    ImageLoadError,
    ManifestFormatError,
    ManifestValidationError,
    generate_synthetic_dataset,
    load_manifest,
    save_manifest,
    write_images,
)
from satssl.detkit.io import (
    DetectionFileError,
    read_ground_truth,
    read_image_sizes,
    read_predictions,
    write_ground_truth,
    write_image_sizes,
)
from satssl.detkit.metrics import evaluate_detections
from satssl.detkit.sampling import matriochka_sample
from satssl.detkit.synthetic import synthetic_detection_dataset
from satssl.detkit.tiling import VEHICLE_CLASSES, DetectionDataset, classify_tiles, subsample_negative_tiles, tile_image
from satssl.mocotp.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from satssl.mocotp.encoder import to_tensor
from satssl.mocotp.train import pretrain
from satssl.probe import render_table, run_label_efficiency_suite

log = logging.getLogger("satssl")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (
    ConfigError,
    ManifestFormatError,
    ManifestValidationError,
    DetectionFileError,
    CheckpointError,
)

CHECKPOINT_NAME = "checkpoint.bin"
GT_NAME = "ground_truth.jsonl"
SIZES_NAME = "images.jsonl"


def _dump(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_output(cfg: ExperimentConfig) -> Path:
    out = cfg.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


def _load_split(cfg: ExperimentConfig, which: str):
    ds = cfg.dataset
    spec = ds.synthetic if which == "train" else ds.val_synthetic
    if spec is not None:
        return generate_synthetic_dataset(spec)
    path = cfg.resolve(ds.manifest if which == "train" else ds.val_manifest)
    manifest = load_manifest(path)
    root = cfg.resolve(ds.image_root) if ds.image_root else path.parent
    return manifest, DiskImages(manifest, root)


def _vocab(cfg: ExperimentConfig):
    return cfg.detkit.class_vocabulary or VEHICLE_CLASSES


# -- commands -------------------------------------------------------------------------------


def cmd_synth_gen(cfg: ExperimentConfig, args) -> int:
    out = _prepare_output(cfg)
    if args.detection:
        rng = substream(cfg.seed, "synth/detection")
        data = synthetic_detection_dataset(rng, num_images=args.num_images)
        target = out / "detection"
        target.mkdir(parents=True, exist_ok=True)
        write_image_sizes(data.image_sizes, target / SIZES_NAME)
        write_ground_truth(data.objects, target / GT_NAME, data.class_vocabulary)
        print(f"wrote {len(data.image_sizes)} images, {len(data.objects)} objects to {target}")
        return EXIT_OK
    specs = [("train", cfg.dataset.synthetic), ("val", cfg.dataset.val_synthetic)]
    if specs[0][1] is None:
        raise ConfigError("synth-gen needs dataset.synthetic")
    for name, spec in specs:
        if spec is None:
            continue
        manifest, images = generate_synthetic_dataset(spec)
        root = out / "data"
        write_images(images, manifest, root)
        save_manifest(manifest, root / f"{name}.jsonl")
        print(f"{name}: {len(manifest)} images in {len(manifest.groups)} locations -> {root / (name + '.jsonl')}")
    return EXIT_OK


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    validate_dataset(cfg)
    out = _prepare_output(cfg)
    manifest, images = _load_split(cfg, "train")
    rng = substream(cfg.seed, "pretrain")
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def on_epoch(record):
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        log.info("epoch %d loss %.5f", record["epoch"], record["mean_loss"])

    result = pretrain(manifest, cfg.contrastive, cfg.augmentation, rng, images, epoch_callback=on_epoch)
    extra = {"seed": cfg.seed, "augmentation": cfg.augmentation.to_dict(), "epochs_run": len(result.log)}
    save_checkpoint(result.state, cfg.contrastive, out / CHECKPOINT_NAME, extra=extra)
    _dump(cfg.to_dict(), out / "config.json")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    print(f"log: {log_path} ({len(result.log)} epochs)")
    return EXIT_OK


def _check_compatible(state, images, manifest, size):
    rec = next(iter(manifest.records()))
    img = np.asarray(images[rec.image_id])
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigError(f"images must be HxWx3, {rec.image_id} has shape {img.shape}")
    backbone = state.query.backbone
    backbone.eval()
    try:
        with torch.no_grad():
            backbone(to_tensor(np.zeros((1, size, size, 3), dtype=np.float32)))
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint encoder cannot consume {size}x{size}x3 inputs: {exc}") from None


def cmd_probe(cfg: ExperimentConfig, args) -> int:
    validate_dataset(cfg, need_val=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out / CHECKPOINT_NAME
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    state, _, _ = load_checkpoint(ckpt)
    out = _prepare_output(cfg)
    train, images = _load_split(cfg, "train")
    val, val_images = _load_split(cfg, "val")
    if train.class_vocabulary != val.class_vocabulary:
        raise ConfigError("train and validation manifests use different class vocabularies")
    merged = _MergedImages(images, val_images)
    _check_compatible(state, merged, train, cfg.probe.config.output_size)
    report = run_label_efficiency_suite(
        state,
        train,
        val,
        merged,
        substream(cfg.seed, "probe"),
        fractions=cfg.probe.fractions,
        replicates=cfg.probe.replicates,
        modes=cfg.probe.modes,
        base_cfg=cfg.probe.config,
        aug_cfg=cfg.augmentation,
    )
    report["checkpoint"] = str(ckpt)
    table = render_table(report)
    _dump(report, out / "probe_report.json")
    (out / "probe_table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


class _MergedImages(dict):
    """Read-through view over two image stores (train and validation may live apart)."""

    def __init__(self, first, second):
        super().__init__()
        self._stores = (first, second)

    def __missing__(self, key):
        for store in self._stores:
            if key in store:
                return store[key]
        raise KeyError(key)

    def __contains__(self, key):
        return any(key in s for s in self._stores)


def cmd_det_eval(cfg: ExperimentConfig, args) -> int:
    vocab = _vocab(cfg)
    for path in (args.gt, args.pred):
        if not Path(path).is_file():
            raise ConfigError(f"{path} does not exist")
    gts = read_ground_truth(args.gt, vocab)
    preds = read_predictions(args.pred, vocab)
    d = cfg.detkit
    report = evaluate_detections(preds, gts, vocab, d.score_thresholds, d.iou_threshold, d.selection_threshold)
    out = _prepare_output(cfg)
    _dump(report, out / "det_report.json")
    print(render_report(report))
    return EXIT_OK


def _read_dataset(dataset_dir, vocab) -> DetectionDataset:
    root = Path(dataset_dir)
    for name in (SIZES_NAME, GT_NAME):
        if not (root / name).is_file():
            raise ConfigError(f"{root / name} does not exist")
    sizes = read_image_sizes(root / SIZES_NAME)
    objects = read_ground_truth(root / GT_NAME, vocab)
    try:
        return DetectionDataset(sizes, objects, tuple(vocab))
    except ValueError as exc:
        raise ConfigError(f"{root}: {exc}") from None


def cmd_tile(cfg: ExperimentConfig, args) -> int:
    vocab = _vocab(cfg)
    data = _read_dataset(args.dataset_dir, vocab)
    out = _prepare_output(cfg)
    d = cfg.detkit
    windows = {i: tile_image(w, h, d.tile) for i, (w, h) in sorted(data.image_sizes.items())}
    positives, negatives = classify_tiles(data, windows, d.min_area_fraction)
    kept = subsample_negative_tiles(negatives, d.keep_ratio, substream(cfg.seed, "detkit/tile"))
    lines = []
    for tile in positives + kept:
        lines.append(
            json.dumps(
                {
                    "image_id": tile.image_id,
                    "window": list(tile.window.as_tuple()),
                    "positive": tile.positive,
                    "objects": [
                        {"class": vocab[o.class_id], "xmin": o.box.xmin, "ymin": o.box.ymin, "xmax": o.box.xmax, "ymax": o.box.ymax}
                        for o in tile.objects
                    ],
                }
            )
        )
    (out / "tiles.jsonl").write_text("".join(s + "\n" for s in lines), encoding="utf-8")
    summary = {
        "windows": sum(len(w) for w in windows.values()),
        "positive": len(positives),
        "negative": len(negatives),
        "negative_kept": len(kept),
        "tile": {"tile_size": d.tile.tile_size, "overlap": d.tile.overlap},
    }
    _dump(summary, out / "tiles_summary.json")
    print(json.dumps(summary))
    return EXIT_OK


def subset_names(n):
    return ["X" * (i + 1) + "S" for i in range(n)]


def cmd_matriochka(cfg: ExperimentConfig, args) -> int:
    vocab = _vocab(cfg)
    data = _read_dataset(args.dataset_dir, vocab)
    out = _prepare_output(cfg) / "matriochka"
    d = cfg.detkit
    counts = data.class_counts()
    by_image = data.objects_by_image()
    names = subset_names(len(d.target_fractions))
    total = np.sum(list(counts.values()), axis=0)
    report = {"vocabulary": list(vocab), "full": {"images": len(counts), "class_counts": total.tolist()}, "seeds": []}
    warnings = []
    for s in range(d.sampling_seeds):
        res = matriochka_sample(counts, d.target_fractions, substream(cfg.seed, f"detkit/matriochka/{s}"), d.tolerance)
        for big, small in zip(res.subsets, res.subsets[1:]):
            if not set(small) <= set(big):
                raise RuntimeError(f"seed {s}: subsets are not nested")
        entry = {"seed_index": s, "subsets": {}}
        for name, ids, stats in zip(names, res.subsets, res.stats):
            target = out / f"seed{s}" / name
            target.mkdir(parents=True, exist_ok=True)
            write_image_sizes({i: data.image_sizes[i] for i in ids}, target / SIZES_NAME)
            write_ground_truth([o for i in ids for o in by_image.get(i, [])], target / GT_NAME, vocab)
            entry["subsets"][name] = stats
        warnings.extend(f"seed {s}: {w}" for w in res.warnings)
        report["seeds"].append(entry)
    report["warnings"] = warnings
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    _dump(report, out / "matriochka_report.json")
    table = render_report(report)
    (out / "matriochka_table.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


# -- report rendering -----------------------------------------------------------------------


def _table(rows):
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


def render_report(report: dict) -> str:
    """Plain-text rendering of a probe, detection or nested-sampling report."""
    if "cells" in report:
        return render_table(report)
    if "level1" in report:
        l1, l2 = report["level1"], report["level2"]
        rows = [["metric", "value"], ["level-1 F1 (max)", f"{l1['f1']:.4f}"]]
        rows.append([f"level-1 F1 @ {l1['selection_threshold']:g}", f"{l1['f1_at_selection_threshold']:.4f}"])
        rows.append(["level-1 AP", f"{l1['ap']:.4f}"])
        rows.append(["level-2 mAP", f"{l2['map']:.4f}"])
        rows += [[f"AP {name}", f"{ap:.4f}"] for name, ap in l2["per_class"].items()]
        return _table(rows)
    if "seeds" in report:
        vocab = report["vocabulary"]
        rows = [["subset", "images", "objects"] + vocab]
        full = report["full"]
        rows.append(["S", full["images"], sum(full["class_counts"])] + full["class_counts"])
        for entry in report["seeds"]:
            for name, st in entry["subsets"].items():
                rows.append([f"{name} (seed {entry['seed_index']})", st["images"], st["observables"]] + st["class_counts"])
        return _table(rows)
    raise ValueError("unrecognised report layout")


def cmd_report(cfg, args) -> int:
    path = Path(args.input)
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from None
    try:
        print(render_report(report))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: not a recognised report ({exc})") from None
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="satssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, needs_config=True, help=None):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=needs_config, help="experiment JSON file")
        p.add_argument("--seed", type=int, help="override the config's root seed")
        p.add_argument("--output-dir", help="override the config's output directory")
        p.set_defaults(func=func)
        return p

    p = add("synth-gen", cmd_synth_gen, needs_config=False, help="render the synthetic temporal dataset to disk")
    p.add_argument("--detection", action="store_true", help="write a synthetic detection inventory instead")
    p.add_argument("--num-images", type=int, default=204)
    add("pretrain", cmd_pretrain, help="contrastive pretraining with temporal positives")
    p = add("probe", cmd_probe, help="label-efficiency suite on a pretrained checkpoint")
    p.add_argument("--checkpoint", help="defaults to <output-dir>/checkpoint.bin")
    p = add("det-eval", cmd_det_eval, needs_config=False, help="score detections against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p = add("tile", cmd_tile, needs_config=False, help="tile large rasters and subsample negatives")
    p.add_argument("--dataset-dir", required=True)
    p = add("matriochka", cmd_matriochka, needs_config=False, help="nested class-preserving subsets")
    p.add_argument("--dataset-dir", required=True)
    p = add("report", cmd_report, needs_config=False, help="render a JSON report as a table")
    p.add_argument("--input", required=True)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = str(Path(args.output_dir).resolve())
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse reports usage problems with status 2; they are validation errors here
        return EXIT_OK if exc.code in (0, None) else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
        if cfg.deterministic:
            torch.set_num_threads(1)
        return args.func(cfg, args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ImageLoadError, RuntimeError, OSError, ValueError, FloatingPointError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
