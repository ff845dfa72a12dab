from __future__ import annotations

import torch
import torch.nn as nn


@torch.no_grad()
def ema_tensor_(teacher: torch.Tensor, student: torch.Tensor, m: float) -> torch.Tensor:
    """In place: teacher <- m * teacher + (1 - m) * student."""
    return teacher.mul_(m).add_(student, alpha=1.0 - m)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, m: float) -> nn.Module:
    """Move every teacher parameter and float buffer towards the student.

    The student may own extra modules (predictors) that have no teacher
    counterpart; every teacher tensor must have a same-shaped student twin.
    Integer buffers (BN batch counters) are copied.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    s_params = dict(student.named_parameters())
    s_buffers = dict(student.named_buffers())
    pairs = []
    for name, t in teacher.named_parameters():
        pairs.append((name, t, s_params.get(name)))
    for name, t in teacher.named_buffers():
        pairs.append((name, t, s_buffers.get(name)))
    for name, t, s in pairs:
        if s is None or s.shape != t.shape:
            raise ValueError(f"shape mismatch between teacher and student at {name!r}")
    for name, t, s in pairs:
        if t.is_floating_point():
            ema_tensor_(t, s, m)
        else:
            t.copy_(s)
    return teacher
