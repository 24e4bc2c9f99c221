"""InfoNCE over a memory queue, with optional exclusion of same-location negatives."""

from __future__ import annotations

import torch


def _check_tau(tau):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def info_nce(q: torch.Tensor, k_plus: torch.Tensor, negatives: torch.Tensor | None, tau: float) -> torch.Tensor:
    """Loss for a single query: ``-log softmax`` of the positive logit among ``[k+, negatives]``."""
    _check_tau(tau)
    pos = (q * k_plus).sum(-1, keepdim=True)
    if negatives is None or len(negatives) == 0:
        logits = pos / tau
    else:
        logits = torch.cat([pos, negatives @ q]) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def contrastive_loss(
    q: torch.Tensor,
    k: torch.Tensor,
    queue_keys: torch.Tensor,
    tau: float,
    q_groups: torch.Tensor | None = None,
    queue_groups: torch.Tensor | None = None,
    reduction: str = "mean",
) -> torch.Tensor:
    """Batched InfoNCE.

    ``q`` and ``k`` are ``B x d``, ``queue_keys`` is ``N x d`` (filled entries only).  When
    group ids are given, queue entries sharing the query's group are removed from the
    denominator.
    """
    _check_tau(tau)
    pos = (q * k).sum(1, keepdim=True)
    neg = q @ queue_keys.T
    logits = torch.cat([pos, neg], dim=1) / tau
    if q_groups is not None and queue_groups is not None and neg.shape[1] > 0:
        collide = q_groups[:, None] == queue_groups[None, :]
        keep = torch.cat([torch.ones_like(collide[:, :1]), ~collide], dim=1)
        logits = logits.masked_fill(~keep, float("-inf"))
    loss = torch.logsumexp(logits, dim=1) - logits[:, 0]
    if reduction == "mean":
        return loss.mean()
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


def masked_info_nce(q: torch.Tensor, q_group: int, k_plus: torch.Tensor, queue, tau: float) -> torch.Tensor:
    """Single-query loss against ``queue`` with same-group entries excluded."""
    _check_tau(tau)
    keys, groups = queue.filled()
    return contrastive_loss(
        q[None],
        k_plus[None],
        keys.to(q.dtype),
        tau,
        q_groups=torch.as_tensor([q_group]),
        queue_groups=groups,
    )
