"""Momentum contrast with temporal positives and false-negative masking."""

from satssl.mocotp.checkpoint import (
    CheckpointError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from satssl.mocotp.config import ContrastiveConfig
from satssl.mocotp.encoder import (
    ContrastiveEncoder,
    EncoderConfig,
    EncoderState,
    ema_update,
    encode,
)
from satssl.mocotp.loss import contrastive_loss, info_nce, masked_info_nce
from satssl.mocotp.queue import MemoryQueue
from satssl.mocotp.train import PretrainError, PretrainResult, cosine_lr, pretrain

__all__ = [
    "CheckpointError",
    "CheckpointVersionError",
    "ContrastiveConfig",
    "ContrastiveEncoder",
    "EncoderConfig",
    "EncoderState",
    "MemoryQueue",
    "PretrainError",
    "PretrainResult",
    "contrastive_loss",
    "cosine_lr",
    "ema_update",
    "encode",
    "info_nce",
    "load_checkpoint",
    "masked_info_nce",
    "pretrain",
    "save_checkpoint",
]
