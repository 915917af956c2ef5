"""Adam with decoupled weight decay and a multi-step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NonFiniteError
from .config import TrainConfig


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig, lr: float | None = None) -> None:
    """In-place bias-corrected Adam update with decoupled weight decay."""
    lr = config.lr if lr is None else lr
    b1, b2 = config.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        with np.errstate(over="ignore", invalid="ignore"):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise NonFiniteError(f"optimizer moments for {name} are not finite")
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype)


def multistep_lr(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    passed = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * config.gamma ** passed
