"""Query/key encoders: a convolutional backbone followed by a two-layer projection head."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = "small_cnn"
    width: int = 32
    embedding_dim: int = 64
    norm: str = "batch"
    bn_splits: int = 4

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return {
            "arch": self.arch,
            "width": self.width,
            "embedding_dim": self.embedding_dim,
            "norm": self.norm,
            "bn_splits": self.bn_splits,
        }


class SplitBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm whose training statistics are computed over ``num_splits`` interleaved sub-batches.

    Emulates per-device statistics on a single device; combined with shuffling the key batch
    it stops a query and its key from sharing normalisation statistics.
    """

    def __init__(self, num_features, num_splits, **kwargs):
        super().__init__(num_features, **kwargs)
        self.num_splits = num_splits

    def forward(self, x):
        n, c, h, w = x.shape
        s = self.num_splits
        if not self.training or s <= 1 or n % s:
            return super().forward(x)
        mean_split = self.running_mean.repeat(s)
        var_split = self.running_var.repeat(s)
        out = F.batch_norm(
            x.view(-1, c * s, h, w),
            mean_split,
            var_split,
            None if self.weight is None else self.weight.repeat(s),
            None if self.bias is None else self.bias.repeat(s),
            True,
            self.momentum,
            self.eps,
        ).view(n, c, h, w)
        self.running_mean.copy_(mean_split.view(s, c).mean(0))
        self.running_var.copy_(var_split.view(s, c).mean(0))
        return out


def _norm(kind, channels, splits=1):
    if kind == "split_batch":
        return SplitBatchNorm2d(channels, splits)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        return nn.GroupNorm(8, channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm {kind!r}")


def _stage(cin, cout, stride, norm, splits):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=norm == "none"),
        _norm(norm, cout, splits),
        nn.ReLU(inplace=True),
    )


class SmallConvNet(nn.Module):
    """Four conv stages and global average pooling; ``out_dim = 4 * width``."""

    def __init__(self, width=32, norm="batch", splits=4):
        super().__init__()
        w = width
        self.stages = nn.Sequential(
            _stage(3, w, 1, norm, splits),
            _stage(w, 2 * w, 2, norm, splits),
            _stage(2 * w, 4 * w, 2, norm, splits),
            _stage(4 * w, 4 * w, 2, norm, splits),
        )
        self.out_dim = 4 * w

    def forward(self, x):
        return self.stages(x).mean(dim=(2, 3))


def _resnet50():
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    out_dim = net.fc.in_features
    net.fc = nn.Identity()
    net.out_dim = out_dim
    return net


def build_backbone(cfg: EncoderConfig) -> nn.Module:
    if cfg.arch == "small_cnn":
        return _Standardize(SmallConvNet(cfg.width, cfg.norm, cfg.bn_splits))
    if cfg.arch == "resnet50":
        return _Standardize(_resnet50())
    raise ValueError(f"unknown backbone {cfg.arch!r}")


class ContrastiveEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = build_backbone(cfg)
        d = self.backbone.out_dim
        self.head = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, cfg.embedding_dim))

    @property
    def feature_dim(self):
        return self.backbone.out_dim

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        """Unnormalized projection output."""
        return self.head(self.backbone(x))


class _Standardize(nn.Module):
    """Per-image contrast normalisation in front of the backbone.

    Removes each image's global brightness and contrast, which otherwise offer the contrastive
    task a colour shortcut; ``eps`` keeps flat images finite.
    """

    def __init__(self, backbone, eps=0.05):
        super().__init__()
        self.net = backbone
        self.eps = eps
        self.out_dim = backbone.out_dim

    def forward(self, x):
        m = x.mean(dim=(1, 2, 3), keepdim=True)
        sd = x.std(dim=(1, 2, 3), keepdim=True, unbiased=False)
        return self.net((x - m) / (sd + self.eps))


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """``N x H x W x 3`` images (numpy or tensor, float in [0,1] or uint8) to ``N x 3 x H x W``."""
    if isinstance(images, np.ndarray):
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
        images = torch.from_numpy(np.ascontiguousarray(images))
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected a batch shaped N x H x W x 3, got {tuple(images.shape)}")
    return images.permute(0, 3, 1, 2).to(dtype).contiguous()


def encode(params: ContrastiveEncoder, images) -> torch.Tensor:
    """L2-normalized embeddings, differentiable w.r.t. ``params`` unless called under no_grad."""
    x = to_tensor(images, dtype=next(params.parameters()).dtype)
    return F.normalize(params(x), dim=1)


class EncoderState:
    """Query encoder (trained by gradients) and its momentum copy (EMA only)."""

    def __init__(self, query: ContrastiveEncoder, key: ContrastiveEncoder | None = None):
        self.query = query
        if key is None:
            key = copy.deepcopy(query)
        self.key = key
        for p in self.key.parameters():
            p.requires_grad_(False)
        _check_shapes(self)

    @classmethod
    def create(cls, cfg: EncoderConfig = EncoderConfig(), seed: int = 0):
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            query = ContrastiveEncoder(cfg)
        finally:
            torch.random.set_rng_state(gen_state)
        return cls(query)

    @property
    def cfg(self) -> EncoderConfig:
        return self.query.cfg


def _check_shapes(state):
    q = dict(state.query.named_parameters())
    k = dict(state.key.named_parameters())
    if q.keys() != k.keys() or any(q[n].shape != k[n].shape for n in q):
        raise ValueError("query and key encoders must have identical parameter shapes")


@torch.no_grad()
def ema_update(state: EncoderState, m_ema: float) -> EncoderState:
    """``key <- m * key + (1 - m) * query`` for every parameter.

    Normalisation buffers are not averaged; the key encoder accumulates its own running
    statistics from its forward passes.
    """
    if not 0 <= m_ema <= 1:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {m_ema}")
    _check_shapes(state)
    for pq, pk in zip(state.query.parameters(), state.key.parameters()):
        pk.copy_(pk * m_ema + pq * (1.0 - m_ema))
    return state
