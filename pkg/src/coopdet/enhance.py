"""Context enhancement: dilated-convolution pyramid, channel gating, residual."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import ChannelNorm, Conv2d, Linear, Module
from .tensor import Tensor

DEFAULT_RATES = (1, 3, 6, 12)


class AsppParams(Module):
    def __init__(self, dim: int, rng: np.random.Generator, branch_dim: int = 64, rates=DEFAULT_RATES):
        if branch_dim < 1 or dim < 1:
            raise DimensionError("ASPP widths must be positive")
        self.rates = tuple(int(r) for r in rates)
        self.branches = [Conv2d(dim, branch_dim, 3, rng, dilation=r) for r in self.rates]
        self.pool_proj = Linear(dim, branch_dim, rng)
        self.proj = Conv2d((len(self.rates) + 1) * branch_dim, dim, 1, rng)
        self.norm = ChannelNorm(dim)
        self.dim = dim
        self.branch_dim = branch_dim


class SeParams(Module):
    def __init__(self, dim: int, rng: np.random.Generator, reduction: int = 16):
        if reduction < 1 or dim % reduction:
            raise DimensionError(f"reduction ratio {reduction} must divide {dim}")
        self.fc1 = Linear(dim, dim // reduction, rng)
        self.fc2 = Linear(dim // reduction, dim, rng)


class Enhancer(Module):
    def __init__(self, dim: int, rng: np.random.Generator, branch_dim: int = 64, reduction: int = 16,
                 rates=DEFAULT_RATES):
        self.aspp = AsppParams(dim, rng, branch_dim, rates)
        self.se = SeParams(dim, rng, reduction)


def _batched(f: Tensor) -> tuple[Tensor, bool]:
    if f.ndim == 3:
        return T.reshape(f, (1,) + f.shape), True
    return f, False


def aspp_concat(f: Tensor, p: AsppParams) -> Tensor:
    """The five branch outputs concatenated on the channel axis."""
    f4, squeeze = _batched(f)
    if f4.ndim != 4 or f4.shape[1] != p.dim:
        raise DimensionError(f"ASPP expects {p.dim} input channels, got shape {f.shape}")
    n, _, h, w = f4.shape
    outs = [conv(f4) for conv in p.branches]
    pooled = p.pool_proj(T.global_avg_pool(f4))
    ones = np.ones((1, 1, h, w), dtype=f4.dtype)
    outs.append(T.reshape(pooled, (n, p.branch_dim, 1, 1)) * ones)
    cat = T.concat(outs, axis=1)
    if cat.shape[1] != p.proj.weight.shape[1]:
        raise DimensionError(f"concatenated width {cat.shape[1]} != projection input {p.proj.weight.shape[1]}")
    return T.reshape(cat, cat.shape[1:]) if squeeze else cat


def aspp_forward(f: Tensor, p: AsppParams) -> Tensor:
    out = T.relu(p.norm(p.proj(aspp_concat(f, p))))
    return out


def se_gates(f: Tensor, p: SeParams) -> Tensor:
    """Per-channel gates in (0, 1): ``(D,)`` or ``(N, D)`` matching ``f``."""
    f4, squeeze = _batched(f)
    gates = T.sigmoid(p.fc2(T.relu(p.fc1(T.global_avg_pool(f4)))))
    return T.reshape(gates, gates.shape[1:]) if squeeze else gates


def apply_gates(f_coop: Tensor, f_proj: Tensor, gates: Tensor) -> Tensor:
    return f_coop + T.reshape(gates, gates.shape + (1, 1)) * f_proj


def enhance_forward(f_coop: Tensor, params: Enhancer) -> Tensor:
    proj = aspp_forward(f_coop, params.aspp)
    return apply_gates(f_coop, proj, se_gates(proj, params.se))
