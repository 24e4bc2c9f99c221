from __future__ import annotations

from dataclasses import asdict, dataclass

from satssl.mocotp.encoder import EncoderConfig


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.2
    queue_size: int = 65536
    m_ema: float = 0.999
    base_lr: float = 3e-2
    schedule: str = "cosine"
    batch_size: int = 256
    optimizer_momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 200
    embedding_dim: int = 64
    arch: str = "small_cnn"
    width: int = 32
    norm: str = "batch"
    bn_splits: int = 4
    shuffle_keys: bool = False
    mask_false_negatives: bool = True
    symmetric: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.m_ema <= 1:
            raise ValueError(f"m_ema must lie in [0, 1], got {self.m_ema}")
        if self.batch_size < 1 or self.queue_size < 1 or self.epochs < 1:
            raise ValueError("batch_size, queue_size and epochs must be positive")
        if self.queue_size % self.batch_size:
            raise ValueError(
                f"queue_size ({self.queue_size}) must be a multiple of batch_size ({self.batch_size})"
            )
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            arch=self.arch, width=self.width, embedding_dim=self.embedding_dim, norm=self.norm, bn_splits=self.bn_splits
        )

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)
