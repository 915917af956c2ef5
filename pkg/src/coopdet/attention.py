"""Multi-scale shifted-window self-attention over BEV maps.

Maps are ``(N, D, H, W)`` (a bare ``(D, H, W)`` is promoted). Each window
scale runs an unshifted then a shifted attention layer, each residual, and a
per-location router mixes the scale outputs with softmax weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Conv2d, Linear, Module, make_rng, param
from .tensor import Tensor


@dataclass(frozen=True)
class WindowConfig:
    sizes: tuple[int, ...] = (2, 4, 8, 16)
    heads: tuple[int, ...] = (16, 16, 8, 4)
    head_dims: tuple[int, ...] = (16, 16, 32, 64)

    def __post_init__(self):
        for name in ("sizes", "heads", "head_dims"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not (len(self.sizes) == len(self.heads) == len(self.head_dims)) or not self.sizes:
            raise DimensionError("window sizes, heads and head dims need equal nonzero length")
        if any(s < 1 for s in self.sizes) or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise DimensionError("window sizes must be positive and strictly increasing")
        if any(v < 1 for v in self.heads + self.head_dims):
            raise DimensionError("heads and head dims must be positive")

    @property
    def n_scales(self) -> int:
        return len(self.sizes)


# ------------------------------------------------------------ partitioning


@dataclass(frozen=True)
class WindowLayout:
    """Everything ``merge_windows`` needs to undo ``partition_windows``."""

    n: int
    c: int
    h: int
    w: int
    window: int
    shift: int

    @property
    def padded(self) -> tuple[int, int]:
        k = self.window
        return -(-self.h // k) * k, -(-self.w // k) * k

    @property
    def grid(self) -> tuple[int, int]:
        hp, wp = self.padded
        return hp // self.window, wp // self.window


def _as_batch(f: Tensor) -> tuple[Tensor, bool]:
    if f.ndim == 3:
        return T.reshape(f, (1,) + f.shape), True
    if f.ndim != 4:
        raise DimensionError(f"expected a (N,)D,H,W map, got shape {f.shape}")
    return f, False


def partition_windows(f: Tensor, window: int, shift: int = 0) -> tuple[Tensor, WindowLayout]:
    """Split ``(N, C, H, W)`` into ``(N * nH * nW, window**2, C)`` token groups.

    The map is cyclically displaced by ``-shift`` on both axes, zero-padded
    at the bottom/right to a multiple of ``window``, then cut into windows.
    """
    if window < 1:
        raise DimensionError("window size must be >= 1")
    if shift not in (0, window // 2):
        raise DimensionError(f"shift must be 0 or {window // 2} for window {window}")
    f4, _ = _as_batch(f)
    n, c, h, w = f4.shape
    layout = WindowLayout(n, c, h, w, window, shift)
    x = T.roll(f4, (-shift, -shift), (2, 3))
    hp, wp = layout.padded
    x = T.pad(x, [(0, 0), (0, 0), (0, hp - h), (0, wp - w)])
    gh, gw = layout.grid
    x = T.reshape(x, (n, c, gh, window, gw, window))
    x = T.transpose(x, (0, 2, 4, 3, 5, 1))
    return T.reshape(x, (n * gh * gw, window * window, c)), layout


def merge_windows(windows: Tensor, layout: WindowLayout) -> Tensor:
    """Inverse of :func:`partition_windows`; returns ``(N, C', H, W)``."""
    gh, gw = layout.grid
    k = layout.window
    c = windows.shape[-1]
    if windows.shape[:2] != (layout.n * gh * gw, k * k):
        raise DimensionError(f"window batch {windows.shape} does not fit layout {layout}")
    x = T.reshape(windows, (layout.n, gh, gw, k, k, c))
    x = T.transpose(x, (0, 5, 1, 3, 2, 4))
    x = T.reshape(x, (layout.n, c, gh * k, gw * k))
    if (gh * k, gw * k) != (layout.h, layout.w):
        x = T.getitem(x, (slice(None), slice(None), slice(0, layout.h), slice(0, layout.w)))
    return T.roll(x, (layout.shift, layout.shift), (2, 3))


# ------------------------------------------------------------------ layers


def relative_position_index(window: int) -> np.ndarray:
    """``(w², w²)`` indices into a ``(2w-1)²`` bias table."""
    ys, xs = np.meshgrid(np.arange(window), np.arange(window), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()], axis=1)
    rel = coords[:, None, :] - coords[None, :, :] + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


class AttentionLayer(Module):
    """Q/K/V/output projections plus a zero-initialized relative-position bias."""

    def __init__(self, dim: int, window: int, heads: int, head_dim: int, rng: np.random.Generator):
        inner = heads * head_dim
        self.q = Linear(dim, inner, rng)
        # a key bias only shifts each query's logits uniformly, so it is omitted
        self.k = Linear(dim, inner, rng, bias=False)
        self.v = Linear(dim, inner, rng)
        self.out = Linear(inner, dim, rng)
        self.bias_table = param(np.zeros((heads, (2 * window - 1) ** 2)))
        self.window = window
        self.heads = heads
        self.head_dim = head_dim
        self.dim = dim


def attention_core(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
                   tag: str | None = "qk") -> Tensor:
    """Scaled dot-product attention over ``(..., T, d)`` operands."""
    d = q.shape[-1]
    logits = T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)), tag=tag)
    logits = logits * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    return T.matmul(T.softmax_lastdim(logits), v, tag=None if tag is None else tag + "v")


def _split_heads(x: Tensor, heads: int, head_dim: int) -> Tensor:
    b, t, _ = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, head_dim)), (0, 2, 1, 3))


def window_self_attention(windows: Tensor, layer: AttentionLayer, tag: str | None = "qk") -> Tensor:
    """Multi-head attention inside each window of a ``(B, w², C)`` batch."""
    if windows.ndim != 3 or windows.shape[1] != layer.window ** 2:
        raise DimensionError(f"expected (B, {layer.window ** 2}, C) windows, got {windows.shape}")
    if windows.shape[2] != layer.dim:
        raise DimensionError(f"window channels {windows.shape[2]} != projection input {layer.dim}")
    b, t, _ = windows.shape
    h, d = layer.heads, layer.head_dim
    q = _split_heads(layer.q(windows), h, d)
    k = _split_heads(layer.k(windows), h, d)
    v = _split_heads(layer.v(windows), h, d)
    idx = relative_position_index(layer.window)
    bias = T.getitem(layer.bias_table, (slice(None), idx))
    ctx = attention_core(q, k, v, bias, tag=tag)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, h * d))
    return layer.out(ctx)


def attention_layer_forward(f: Tensor, layer: AttentionLayer, shift: int, tag: str | None = "qk") -> Tensor:
    """Residual windowed attention on a ``(N, C, H, W)`` map."""
    windows, layout = partition_windows(f, layer.window, shift)
    return f + merge_windows(window_self_attention(windows, layer, tag), layout)


def global_self_attention(f: Tensor, layer: AttentionLayer, tag: str | None = "qk") -> Tensor:
    """Plain multi-head attention over all ``H*W`` tokens (bias ignored)."""
    f4, _ = _as_batch(f)
    n, c, hh, ww = f4.shape
    tokens = T.transpose(T.reshape(f4, (n, c, hh * ww)), (0, 2, 1))
    h, d = layer.heads, layer.head_dim
    q = _split_heads(layer.q(tokens), h, d)
    k = _split_heads(layer.k(tokens), h, d)
    v = _split_heads(layer.v(tokens), h, d)
    ctx = attention_core(q, k, v, None, tag=tag)
    ctx = layer.out(T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, hh * ww, h * d)))
    return T.reshape(T.transpose(ctx, (0, 2, 1)), (n, c, hh, ww))


# ----------------------------------------------------------------- routing


class MultiScaleAttention(Module):
    """Per scale an unshifted and a shifted layer, and the scale router."""

    def __init__(self, dim: int, config: WindowConfig, rng: np.random.Generator):
        self.config = config
        self.layers = [
            AttentionLayer(dim, w, h, d, rng)
            for w, h, d in zip(config.sizes, config.heads, config.head_dims)
            for _ in range(2)
        ]
        self.router = Conv2d(dim, config.n_scales, 1, rng)


def scale_router(f: Tensor, router: Conv2d) -> Tensor:
    """Softmax over the scale axis of a 1x1 convolution: ``(N, S, H, W)``."""
    f4, squeeze = _as_batch(f)
    logits = router(f4)
    w = T.transpose(T.softmax_lastdim(T.transpose(logits, (0, 2, 3, 1))), (0, 3, 1, 2))
    return T.reshape(w, w.shape[1:]) if squeeze else w


def scale_branches(f: Tensor, msa: MultiScaleAttention) -> list[Tensor]:
    f4, _ = _as_batch(f)
    out = []
    for s, w in enumerate(msa.config.sizes):
        x = attention_layer_forward(f4, msa.layers[2 * s], 0)
        x = attention_layer_forward(x, msa.layers[2 * s + 1], w // 2)
        out.append(x)
    return out


def route(branches: list[Tensor], weights: Tensor) -> Tensor:
    """``sum_s weights[:, s] * branches[s]`` with weights broadcast over channels."""
    total = None
    for s, x in enumerate(branches):
        term = x * T.getitem(weights, (slice(None), slice(s, s + 1)))
        total = term if total is None else total + term
    return total


def msw_forward(f: Tensor, msa: MultiScaleAttention, weights: Tensor | None = None) -> Tensor:
    """Router-weighted multi-scale windowed attention; shape preserved.

    ``weights`` overrides the router output when given (``(N, S, H, W)``).
    """
    f4, squeeze = _as_batch(f)
    if weights is None:
        weights = scale_router(f4, msa.router)
    elif weights.ndim == 3:
        weights = T.reshape(weights, (1,) + weights.shape)
    out = route(scale_branches(f4, msa), weights)
    return T.reshape(out, out.shape[1:]) if squeeze else out


def build_msa(dim: int, config: WindowConfig, seed: int = 0) -> MultiScaleAttention:
    return MultiScaleAttention(dim, config, make_rng(seed, 1))
