"""Class-grouped cross-agent fusion and uniform baselines.

Agent maps for one scene are stacked as ``(N, D, H, W)`` in the ego frame,
with ``ego`` indexing the ego agent inside that stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .geometry import CLASSES
from .nn import Conv2d, Linear, Module
from .tensor import Tensor

MAX_AGENTS = 4
BASELINE_MODES = ("max", "avg", "single")


@dataclass(frozen=True)
class PathwayConfig:
    heads: int
    head_dim: int
    downsample: int = 1

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise DimensionError("pathway heads and head dim must be positive")
        if self.downsample not in (1, 2):
            raise DimensionError("pathway downsample must be 1 or 2")


@dataclass(frozen=True)
class GroupConfig:
    groups: dict = field(default_factory=lambda: {
        "small": ("pedestrian",),
        "large": ("car", "truck"),
    })
    pathways: dict = field(default_factory=lambda: {
        "small": PathwayConfig(8, 32, 1),
        "large": PathwayConfig(4, 64, 2),
    })

    def __post_init__(self):
        groups = {k: tuple(v) for k, v in self.groups.items()}
        pathways = {k: v if isinstance(v, PathwayConfig) else PathwayConfig(**v)
                    for k, v in self.pathways.items()}
        members = [c for v in groups.values() for c in v]
        if sorted(members) != sorted(CLASSES):
            raise DomainError(f"every class must sit in exactly one group, got {groups}")
        if set(groups) != set(pathways):
            raise DomainError("groups and pathways must share names")
        # canonical order (by earliest member class) so serialization cannot permute group parameters
        order = sorted(groups, key=lambda g: min(CLASSES.index(c) for c in groups[g]))
        object.__setattr__(self, "groups", {g: groups[g] for g in order})
        object.__setattr__(self, "pathways", {g: pathways[g] for g in order})

    def group_of(self, label: str) -> str:
        for name, members in self.groups.items():
            if label in members:
                return name
        raise DomainError(f"unknown class {label!r}")


class CrossAgentParams(Module):
    def __init__(self, dim: int, path: PathwayConfig, rng: np.random.Generator):
        inner = path.heads * path.head_dim
        self.q = Linear(dim, inner, rng)
        # same reasoning as in window attention: a key bias cancels in the softmax
        self.k = Linear(dim, inner, rng, bias=False)
        self.v = Linear(dim, inner, rng)
        self.out = Linear(inner, dim, rng)
        self.path = path


class GroupParams(Module):
    def __init__(self, dim: int, path: PathwayConfig, rng: np.random.Generator):
        self.proj = Conv2d(dim, dim, 1, rng)
        self.attn = CrossAgentParams(dim, path, rng)


class ClassFusion(Module):
    def __init__(self, dim: int, config: GroupConfig, rng: np.random.Generator):
        self.config = config
        self.names = list(config.groups)
        self.groups = [GroupParams(dim, config.pathways[g], rng) for g in self.names]
        self.fuse = Conv2d(len(self.names) * dim, dim, 3, rng)


def _check_agents(maps: Tensor, ego: int) -> int:
    if maps.ndim != 4:
        raise DimensionError(f"agent maps must be (N, D, H, W), got {maps.shape}")
    n = maps.shape[0]
    if n == 0:
        raise DomainError("fusion needs at least one agent")
    if n > MAX_AGENTS:
        raise DomainError(f"at most {MAX_AGENTS} agents are supported, got {n}")
    if not 0 <= ego < n:
        raise DomainError(f"ego index {ego} outside 0..{n - 1}")
    return n


def project_group_features(maps: Tensor, group: GroupParams) -> Tensor:
    return group.proj(maps)


def cross_agent_attention(maps: Tensor, ego: int, params: CrossAgentParams) -> tuple[Tensor, Tensor]:
    """Per-location attention of the ego query over all agents' keys.

    Returns the fused ``(D, H, W)`` map and the weights ``(h, w, heads, N)``
    at the pathway's working resolution.
    """
    n = _check_agents(maps, ego)
    _, d_model, hh, ww = maps.shape
    path = params.path
    x = T.avg_pool2(maps) if path.downsample == 2 else maps
    h, w = x.shape[-2:]
    tokens = T.reshape(T.transpose(x, (2, 3, 0, 1)), (h * w, n, d_model))
    heads, hd = path.heads, path.head_dim

    q = T.getitem(tokens, (slice(None), slice(ego, ego + 1)))
    q = T.transpose(T.reshape(params.q(q), (h * w, 1, heads, hd)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(params.k(tokens), (h * w, n, heads, hd)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(params.v(tokens), (h * w, n, heads, hd)), (0, 2, 1, 3))
    alpha = T.softmax_lastdim(T.matmul(q, k) * (1.0 / math.sqrt(hd)))
    ctx = T.reshape(T.matmul(alpha, v), (h * w, heads * hd))
    out = T.reshape(T.transpose(params.out(ctx), (1, 0)), (d_model, h, w))
    if (h, w) != (hh, ww):
        out = T.resize_bilinear(out, (hh, ww))
    return out, T.reshape(alpha, (h, w, heads, n))


def fuse_groups(fused: list[Tensor], conv: Conv2d) -> Tensor:
    shapes = {f.shape for f in fused}
    if len(shapes) != 1:
        raise DimensionError(f"group maps differ in shape: {sorted(shapes)}")
    if conv.weight.shape[1] != sum(f.shape[0] for f in fused):
        raise DimensionError("fusion convolution input channels do not match the concatenated groups")
    return conv(T.concat(fused, axis=0))


def class_fusion(maps: Tensor, ego: int, fusion: ClassFusion) -> Tensor:
    _check_agents(maps, ego)
    fused = []
    for group in fusion.groups:
        fused.append(cross_agent_attention(project_group_features(maps, group), ego, group.attn)[0])
    return fuse_groups(fused, fusion.fuse)


def baseline_fuse(maps: Tensor, mode: str, ego: int = 0, single: CrossAgentParams | None = None) -> Tensor:
    """Class-agnostic fusion: elementwise max, mean, or one attention pathway."""
    _check_agents(maps, ego)
    if mode == "max":
        return T.max_(maps, axis=0)
    if mode == "avg":
        return T.mean(maps, axis=0)
    if mode == "single":
        if single is None:
            raise DomainError("single-path fusion needs attention parameters")
        return cross_agent_attention(maps, ego, single)[0]
    raise DomainError(f"unknown baseline fusion mode {mode!r}; choose from {BASELINE_MODES}")
