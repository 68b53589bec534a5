"""Adam optimizer step and the step-decay learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, UsageError
from .tensor import Parameter


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """In-place Adam update with bias correction.

    ``t`` is the 1-based step count shared by all parameters; moments
    live on the parameters themselves.
    """
    if t < 1:
        raise UsageError(f"step count must be >= 1, got {t}")
    if len(params) != len(grads):
        raise UsageError(f"{len(params)} parameters but {len(grads)} gradients")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter {p.name!r} shape {p.shape}")
        p.m[...] = beta1 * p.m + (1.0 - beta1) * g
        p.v[...] = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / bc1
        v_hat = p.v / bc2
        p.value.data[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_at_epoch(epoch: int, base_lr: float, drops: Sequence[int], factor: float = 0.1) -> float:
    """Step-decay schedule: multiply by ``factor`` once per passed drop epoch.

    With base 1e-4 and drops (100, 200): epochs [0,100) train at 1e-4,
    [100,200) at 1e-5, and everything later at 1e-6.
    """
    lr = base_lr
    for d in drops:
        if epoch >= d:
            lr *= factor
    return lr
