"""Nested, class-preserving subsets of a detection dataset at whole-image granularity."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class MatriochkaResult:
    fractions: list[float]
    subsets: list[list[str]]
    warnings: list[str] = field(default_factory=list)
    stats: list[dict] = field(default_factory=list)


def _proportions(counts):
    total = counts.sum(-1, keepdims=True)
    return np.divide(counts, total, out=np.zeros(counts.shape, dtype=float), where=total > 0)


def _grow(selected, available, counts, target, global_p, rng, overshoot_weight):
    """Greedily add images to ``selected`` until the observable count reaches ``target``."""
    cur = counts[selected].sum(0) if selected else np.zeros(counts.shape[1], dtype=np.int64)
    available = list(available)
    while available and cur.sum() < target:
        cand = np.asarray(available)
        new = cur[None, :] + counts[cand]
        n_new = new.sum(1)
        divergence = np.abs(_proportions(new) - global_p[None, :]).sum(1)
        overshoot = np.maximum(n_new - target, 0) / target
        cost = divergence + overshoot_weight * overshoot
        # random tie-breaking keeps different seeds from converging to one subset
        cost = cost + rng.uniform(0, 1e-9, len(cost))
        if not selected:
            # seed the subset with a random image that does not overshoot on its own
            ok = np.flatnonzero(n_new <= target)
            pick = int(cand[rng.choice(ok)]) if len(ok) else int(cand[np.argmin(cost)])
        else:
            pick = int(cand[np.argmin(cost)])
        if selected and abs(cur.sum() + counts[pick].sum() - target) > abs(cur.sum() - target):
            break
        selected.append(pick)
        available.remove(pick)
        cur = cur + counts[pick]
    return selected


def matriochka_sample(
    image_counts: Mapping[str, np.ndarray],
    target_fractions,
    rng: np.random.Generator,
    tolerance: float = 0.03,
    overshoot_weight: float = 2.0,
) -> MatriochkaResult:
    """Select nested image subsets holding ``target_fractions`` of all observables.

    ``image_counts`` maps image_id to per-class object counts.  The smallest subset is built
    first, adding at each step the image that keeps the subset's class proportions closest
    (L1) to the full dataset's while penalising overshoot of the target count; each larger
    subset then grows from the previous one.  Subsets are returned in the order of
    ``target_fractions`` (largest first).
    """
    fractions = [float(f) for f in target_fractions]
    if not fractions:
        raise ValueError("need at least one target fraction")
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("target fractions must lie in (0, 1]")
    if any(a <= b for a, b in zip(fractions, fractions[1:])):
        raise ValueError("target fractions must be strictly descending")
    ids = list(image_counts)
    counts = np.stack([np.asarray(image_counts[i], dtype=np.int64) for i in ids])
    totals = counts.sum(0)
    total = int(totals.sum())
    if total == 0:
        raise ValueError("dataset holds no observables")
    global_p = totals / total

    selected: list[int] = []
    nested = {}
    for f in reversed(fractions):
        if f == 1:
            selected = list(range(len(ids)))
        else:
            available = [i for i in range(len(ids)) if i not in set(selected)]
            selected = _grow(list(selected), available, counts, f * total, global_p, rng, overshoot_weight)
        nested[f] = list(selected)

    result = MatriochkaResult(fractions=fractions, subsets=[])
    for f in fractions:
        sel = nested[f]
        sub = counts[sel].sum(0)
        n = int(sub.sum())
        p = sub / n if n else np.zeros_like(global_p)
        dev = np.abs(p - global_p)
        result.subsets.append(sorted(ids[i] for i in sel))
        result.stats.append(
            {
                "fraction": f,
                "images": len(sel),
                "observables": n,
                "achieved_fraction": n / total,
                "class_counts": sub.tolist(),
                "max_class_deviation": float(dev.max()),
            }
        )
        bad = np.flatnonzero(dev > tolerance)
        if len(bad):
            msg = f"fraction {f}: class proportions off by more than {tolerance} for classes {bad.tolist()}"
            result.warnings.append(msg)
            log.warning(msg)
        if abs(n / total - f) > 0.1 * f:
            msg = f"fraction {f}: achieved {n / total:.4f}, outside +-10% of target"
            result.warnings.append(msg)
            log.warning(msg)
    return result
