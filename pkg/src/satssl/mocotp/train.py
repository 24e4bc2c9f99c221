"""Pretraining loop: temporal pairs, momentum encoder and a group-tagged negative queue."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from satssl.augment import AugmentationConfig, make_query_key_views
from satssl.dataspec import Manifest, sample_temporal_pair
from satssl.mocotp.config import ContrastiveConfig
from satssl.mocotp.encoder import EncoderState, ema_update, encode
from satssl.mocotp.loss import contrastive_loss
from satssl.mocotp.queue import MemoryQueue

log = logging.getLogger(__name__)


class PretrainError(RuntimeError):
    """Data or contract failure inside the training loop; ``__cause__`` holds the original."""


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class PretrainResult:
    state: EncoderState
    queue: MemoryQueue
    log: list[dict] = field(default_factory=list)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream so augmentation does not depend on batch composition or worker order."""
    return np.random.default_rng([seed, epoch, index])


@torch.no_grad()
def _encode_keys(state, views, rng):
    # shuffled order puts each key in a different normalisation split than its query
    if rng is None:
        return encode(state.key, views)
    perm = rng.permutation(len(views))
    k = encode(state.key, views[perm])
    return k[torch.from_numpy(np.argsort(perm))]


def build_batch(manifest, flat, batch_idx, aug_cfg, rng, images, seed, epoch):
    views_q, views_k, groups = [], [], []
    for i in batch_idx:
        g, j = flat[i]
        pair = sample_temporal_pair(manifest.groups[g], rng, query=j)
        vq, vk = make_query_key_views(pair, aug_cfg, sample_rng(seed, epoch, int(i)), images)
        views_q.append(vq)
        views_k.append(vk)
        groups.append(g)
    return np.stack(views_q), np.stack(views_k), np.asarray(groups, dtype=np.int64)


def pretrain(
    manifest: Manifest,
    cfg: ContrastiveConfig,
    aug_cfg: AugmentationConfig,
    rng: np.random.Generator,
    images,
    state: EncoderState | None = None,
    max_steps: int | None = None,
    epoch_callback=None,
) -> PretrainResult:
    """Train the query encoder with InfoNCE against a queue of momentum-encoded keys.

    Every record in the manifest serves once per epoch as a query; its key is a different
    acquisition of the same location.  With ``cfg.mask_false_negatives`` queue entries from
    the query's own location are left out of the denominator.
    """
    if len(manifest) == 0:
        raise ValueError("cannot pretrain on an empty manifest")
    seed = int(rng.integers(2**31))
    if state is None:
        state = EncoderState.create(cfg.encoder, seed=seed)
    flat = [(g, j) for g, grp in enumerate(manifest.groups) for j in range(len(grp))]
    n = len(flat)
    bs = cfg.batch_size
    steps_per_epoch = n // bs
    if steps_per_epoch == 0:
        raise ValueError(f"manifest has {n} records, fewer than one batch of {bs}")
    total_steps = steps_per_epoch * cfg.epochs
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    queue = MemoryQueue(cfg.queue_size, cfg.embedding_dim)
    params = [p for p in state.query.parameters() if p.requires_grad]
    opt = torch.optim.SGD(
        params, lr=cfg.base_lr, momentum=cfg.optimizer_momentum, weight_decay=cfg.weight_decay
    )
    history = []
    step = 0
    state.query.train()
    state.key.train()
    for epoch in range(cfg.epochs):
        if step >= total_steps:
            break
        order = rng.permutation(n)
        losses = []
        lr = cfg.base_lr
        for b in range(steps_per_epoch):
            if step >= total_steps:
                break
            idx = order[b * bs : (b + 1) * bs]
            try:
                vq, vk, groups = build_batch(manifest, flat, idx, aug_cfg, rng, images, seed, epoch)
            except (OSError, ValueError) as exc:
                raise PretrainError(f"epoch {epoch} step {step}: {exc}") from exc
            lr = cosine_lr(step, total_steps, cfg.base_lr) if cfg.schedule == "cosine" else cfg.base_lr
            for group in opt.param_groups:
                group["lr"] = lr

            g_t = torch.from_numpy(groups)
            q_groups = g_t if cfg.mask_false_negatives else None
            queue_keys, queue_groups = queue.filled()
            q = encode(state.query, vq)
            k = _encode_keys(state, vk, rng if cfg.shuffle_keys else None)
            loss = contrastive_loss(q, k, queue_keys, cfg.tau, q_groups, queue_groups)
            if cfg.symmetric:
                q2 = encode(state.query, vk)
                k2 = _encode_keys(state, vq, rng if cfg.shuffle_keys else None)
                loss = 0.5 * (loss + contrastive_loss(q2, k2, queue_keys, cfg.tau, q_groups, queue_groups))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"epoch {epoch} step {step}: non-finite loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            ema_update(state, cfg.m_ema)
            queue.enqueue(k, groups)
            losses.append(loss.item())
            step += 1
        rec = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "lr": lr,
            "queue_fill": queue.fill_count,
        }
        history.append(rec)
        log.info("epoch %d loss %.4f lr %.4g queue %d", epoch, rec["mean_loss"], lr, queue.fill_count)
        if epoch_callback is not None:
            epoch_callback(rec)
    return PretrainResult(state=state, queue=queue, log=history)
