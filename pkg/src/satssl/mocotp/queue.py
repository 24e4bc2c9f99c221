from __future__ import annotations

import numpy as np
import torch


class MemoryQueue:
    """Fixed-capacity FIFO of unit-norm keys, each tagged with the location group it came from."""

    def __init__(self, capacity: int, dim: int, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.keys = torch.zeros(capacity, dim, dtype=dtype)
        self.group_ids = torch.full((capacity,), -1, dtype=torch.long)
        self.write_pointer = 0
        self.fill_count = 0
        self.total_enqueued = 0

    def __len__(self):
        return self.fill_count

    def filled(self):
        n = self.fill_count
        return self.keys[:n], self.group_ids[:n]

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor, group_ids) -> "MemoryQueue":
        keys = keys.detach()
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} keys exceeds queue capacity {self.capacity}")
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(f"expected keys of shape (b, {self.dim}), got {tuple(keys.shape)}")
        group_ids = torch.as_tensor(np.asarray(group_ids), dtype=torch.long)
        if group_ids.shape != (b,):
            raise ValueError("need exactly one group id per key")
        norms = keys.norm(dim=1)
        if b and not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise ValueError("queue keys must be unit-norm")
        idx = (self.write_pointer + torch.arange(b)) % self.capacity
        self.keys[idx] = keys.to(self.keys.dtype)
        self.group_ids[idx] = group_ids
        self.write_pointer = (self.write_pointer + b) % self.capacity
        self.fill_count = min(self.fill_count + b, self.capacity)
        self.total_enqueued += b
        return self
