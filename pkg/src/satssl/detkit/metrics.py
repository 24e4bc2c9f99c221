"""Detection metrics: greedy IoU matching, PR sweeps, F1, all-points AP and per-class mAP."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from satssl.detkit.boxes import GroundTruthObject, Prediction, iou

DEFAULT_THRESHOLDS = tuple(round(0.15 + 0.05 * i, 2) for i in range(16))


def _score_order(preds):
    # stable: equal scores keep input order
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)


def match_detections(preds, gts, iou_threshold: float = 0.0, class_agnostic: bool = True):
    """Greedy one-to-one matching inside a single image.

    Predictions are visited by descending score; each takes the still-unmatched ground truth
    of highest IoU among those with IoU strictly above ``iou_threshold``.  Returns
    ``(prediction, ground_truth or None)`` pairs in visiting order.
    """
    if iou_threshold < 0:
        raise ValueError("iou_threshold must be non-negative")
    image_ids = {p.image_id for p in preds} | {g.image_id for g in gts}
    if len(image_ids) > 1:
        raise ValueError(f"match_detections expects one image, got {sorted(image_ids)}")
    taken = [False] * len(gts)
    pairs = []
    for i in _score_order(preds):
        p = preds[i]
        best, best_iou = None, iou_threshold
        for j, g in enumerate(gts):
            if taken[j] or (not class_agnostic and g.class_id != p.class_id):
                continue
            v = iou(p.box, g.box)
            if v > best_iou:
                best, best_iou = j, v
        if best is None:
            pairs.append((p, None))
        else:
            taken[best] = True
            pairs.append((p, gts[best]))
    return pairs


def _by_image(items):
    out = defaultdict(list)
    for it in items:
        out[it.image_id].append(it)
    return out


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int

    @property
    def f1(self) -> float:
        s = self.precision + self.recall
        return 0.0 if s == 0 else 2 * self.precision * self.recall / s


def _filter_class(items, class_id):
    return [x for x in items if x.class_id == class_id]


def count_matches(preds, gts, iou_threshold=0.0, class_agnostic=True):
    """Global (tp, fp, fn) after matching image by image."""
    pb, gb = _by_image(preds), _by_image(gts)
    tp = fp = 0
    for image_id in set(pb) | set(gb):
        pairs = match_detections(pb.get(image_id, []), gb.get(image_id, []), iou_threshold, class_agnostic)
        m = sum(g is not None for _, g in pairs)
        tp += m
        fp += len(pairs) - m
    return tp, fp, len(gts) - tp


def pr_curve(preds, gts, score_thresholds=DEFAULT_THRESHOLDS, iou_threshold=0.0, class_agnostic=True):
    """Precision/recall at each score threshold (predictions with score >= threshold kept)."""
    curve = []
    for t in score_thresholds:
        kept = [p for p in preds if p.score >= t]
        tp, fp, fn = count_matches(kept, gts, iou_threshold, class_agnostic)
        precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
        recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
        curve.append(PRPoint(float(t), precision, recall, tp, fp, fn))
    return curve


def f1_sweep(curve) -> float:
    if not curve:
        raise ValueError("empty precision-recall curve")
    best = 0.0
    for pt in curve:
        p, r = (pt.precision, pt.recall) if isinstance(pt, PRPoint) else (pt[-2], pt[-1])
        s = p + r
        best = max(best, 0.0 if s == 0 else 2 * p * r / s)
    return best


def ranked_tp_flags(preds, gts, iou_threshold=0.0, class_agnostic=True):
    """Predictions sorted by descending score, each flagged TP/FP by greedy matching in rank order."""
    order = _score_order(preds)
    gb = _by_image(gts)
    taken = {k: [False] * len(v) for k, v in gb.items()}
    flags = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        p = preds[i]
        cands = gb.get(p.image_id, [])
        best, best_iou = None, iou_threshold
        for j, g in enumerate(cands):
            if taken[p.image_id][j] or (not class_agnostic and g.class_id != p.class_id):
                continue
            v = iou(p.box, g.box)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken[p.image_id][best] = True
            flags[rank] = True
    return [preds[i] for i in order], flags


def average_precision(preds, gts, iou_threshold=0.0, class_agnostic=True) -> float:
    """Area under the monotone precision envelope (all-points interpolation); 0 without ground truth."""
    if not gts:
        return 0.0
    if not preds:
        return 0.0
    _, flags = ranked_tp_flags(preds, gts, iou_threshold, class_agnostic)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / len(gts)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    delta = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(delta * envelope))


def mean_average_precision(preds, gts, class_count: int, iou_threshold=0.0):
    """Mean class-aware AP over classes that have ground truth or predictions.

    Returns ``(map, per_class)`` where ``per_class`` maps class index to AP; classes with
    neither ground truth nor predictions are absent.
    """
    per_class = {}
    for c in range(class_count):
        pc, gc = _filter_class(preds, c), _filter_class(gts, c)
        if not pc and not gc:
            continue
        per_class[c] = average_precision(pc, gc, iou_threshold, class_agnostic=False)
    value = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return value, per_class


def evaluate_detections(
    preds,
    gts,
    class_vocabulary,
    score_thresholds=DEFAULT_THRESHOLDS,
    iou_threshold: float = 0.0,
    selection_threshold: float = 0.15,
) -> dict:
    """Level-1 (class-agnostic) F1/AP and level-2 (per-class) mAP as a JSON-ready dict."""
    curve = pr_curve(preds, gts, score_thresholds, iou_threshold, class_agnostic=True)
    at_sel = pr_curve(preds, gts, [selection_threshold], iou_threshold, class_agnostic=True)[0]
    map_value, per_class = mean_average_precision(preds, gts, len(class_vocabulary), iou_threshold)
    return {
        "level1": {
            "f1": f1_sweep(curve),
            "f1_aggregation": "max over score thresholds",
            "f1_at_selection_threshold": at_sel.f1,
            "selection_threshold": selection_threshold,
            "ap": average_precision(preds, gts, iou_threshold, class_agnostic=True),
            "curve": [
                {"threshold": p.threshold, "precision": p.precision, "recall": p.recall, "tp": p.tp, "fp": p.fp, "fn": p.fn}
                for p in curve
            ],
        },
        "level2": {
            "map": map_value,
            "per_class": {class_vocabulary[c]: ap for c, ap in per_class.items()},
        },
        "iou_threshold": iou_threshold,
    }
