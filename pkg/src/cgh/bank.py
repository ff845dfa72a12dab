"""Fixed-capacity FIFO memory bank of unit-norm teacher embeddings."""

from __future__ import annotations

import torch


class MemoryBank:
    """Ring buffer of ``size`` embeddings that is always full.

    Optionally tracks a class label per slot (``-1`` = unknown) so teacher
    distributions can be scored against ground truth.
    """

    def __init__(self, entries: torch.Tensor, cursor: int = 0, labels: torch.Tensor | None = None):
        if entries.ndim != 2:
            raise ValueError(f"bank entries must be (M, dim), got {tuple(entries.shape)}")
        self.entries = entries
        self.cursor = int(cursor) % entries.shape[0]
        if labels is None:
            labels = torch.full((entries.shape[0],), -1, dtype=torch.long)
        self.labels = labels

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def __len__(self) -> int:
        return self.size

    @property
    def is_labeled(self) -> bool:
        return bool((self.labels >= 0).all())

    @torch.no_grad()
    def enqueue(self, batch: torch.Tensor, labels: torch.Tensor | None = None) -> "MemoryBank":
        """Overwrite the oldest ``len(batch)`` slots starting at the cursor."""
        if batch.ndim != 2 or batch.shape[1] != self.dim:
            raise ValueError(f"expected batch of shape (B, {self.dim}), got {tuple(batch.shape)}")
        n = batch.shape[0]
        if n > self.size:
            raise ValueError(f"batch of {n} is larger than the bank size {self.size}")
        if n == 0:
            return self
        norms = batch.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("bank entries must be unit-norm")
        if labels is None:
            labels = torch.full((n,), -1, dtype=torch.long)
        idx = (self.cursor + torch.arange(n)) % self.size
        self.entries[idx] = batch.detach().to(self.entries.dtype)
        self.labels[idx] = labels.to(torch.long)
        self.cursor = (self.cursor + n) % self.size
        return self

    def state_dict(self) -> dict:
        return {"entries": self.entries.clone(), "labels": self.labels.clone(), "cursor": self.cursor}

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryBank":
        return cls(state["entries"].clone(), int(state["cursor"]), state["labels"].clone())

    def clone(self) -> "MemoryBank":
        return MemoryBank(self.entries.clone(), self.cursor, self.labels.clone())


def init_bank(size: int, dim: int, generator: torch.Generator | None = None,
              dtype: torch.dtype = torch.float32) -> MemoryBank:
    """Bank filled with i.i.d. Gaussian directions, each L2-normalised."""
    if size <= 0 or dim <= 0:
        raise ValueError("bank size and dim must be > 0")
    entries = torch.randn(size, dim, generator=generator, dtype=torch.float64)
    entries = entries / entries.norm(dim=1, keepdim=True)
    return MemoryBank(entries.to(dtype))
