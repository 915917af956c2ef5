"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a plain function that computes its result
with numpy and, when a :class:`Tape` is active and an input requires
gradients, appends one entry holding a backward closure. ``Tape.gradient``
replays those entries in exact reverse order, accumulating additively where
a tensor feeds several consumers.

Layout is channels-first throughout: maps are ``(C, H, W)`` or batched
``(N, C, H, W)``.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float64))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (float64 or float32)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported precision {dtype}")
    prev = default_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite data")
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def max(self, axis: int, keepdims: bool = False):
        return max_(self, axis, keepdims)


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; operations run inside the block are recorded.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable, str]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable, name: str) -> None:
        self.entries.append((out, inputs, backward, name))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to each of ``sources``.

        Sources that ``target`` does not depend on receive zeros.
        """
        if seed is None:
            if target.data.size != 1:
                raise DimensionError("gradient of a non-scalar target needs an explicit seed")
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        keep = {id(s) for s in sources}
        for out, inputs, backward, name in reversed(self.entries):
            key = id(out)
            g = grads.get(key) if key in keep else grads.pop(key, None)
            if g is None:
                continue
            in_grads = backward(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NonFiniteError(f"backward of {name} produced a non-finite gradient")
                k = id(t)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        return [np.asarray(grads.get(id(s), np.zeros_like(s.data)), dtype=s.dtype).reshape(s.shape) for s in sources]


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, name: str) -> Tensor:
    data = np.asarray(data)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name} produced a non-finite value")
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward, name)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    out = np.logaddexp(0, a.data).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def smooth_l1(a: Tensor, sigma: float = 3.0) -> Tensor:
    """Elementwise smooth-L1 with transition at ``|x| = 1/sigma**2``."""
    s2 = sigma * sigma
    x = a.data
    ax = np.abs(x)
    small = ax < 1.0 / s2
    # clamping the quadratic part keeps huge residuals from overflowing
    q = np.minimum(ax, 1.0 / s2)
    out = np.where(small, 0.5 * s2 * q * q, ax - 0.5 / s2).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * np.where(small, s2 * x, np.sign(x)),), "smooth_l1")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where the constant mask ``cond`` is true, else ``b``."""
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),
                            _unbroadcast(np.where(cond, 0, g), b.shape)), "where")


# ----------------------------------------------------------------- reductions


def _expand_grad(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _make(out, (a,), lambda g: (_expand_grad(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1) if a.data.size else 1
    return _make(out, (a,), lambda g: (_expand_grad(g / count, a.shape, axis, keepdims).copy(),), "mean")


def max_(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    idx = np.argmax(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, idx_k, gk, axis=axis)
        return (gx,)

    return _make(out, (a,), backward, "max")


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("log_softmax needs a non-empty last dimension")
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), backward, "log_softmax")


# ------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "stack")


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` gives (before, after) per axis."""
    widths = [tuple(w) for w in widths]
    if all(w == (0, 0) for w in widths):
        return a
    out = np.pad(a.data, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(out, (a,), lambda g: (g[sl],), "pad")


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    if not any(shifts):
        return a
    neg_shifts = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, neg_shifts, axes),), "roll")


def scatter(values: Tensor, index: tuple[np.ndarray, ...], shape: tuple[int, ...]) -> Tensor:
    """Write ``values`` into a zero tensor of ``shape`` at unique positions ``index``."""
    out = np.zeros(shape, dtype=values.dtype)
    out[index] = values.data
    return _make(out, (values,), lambda g: (g[index],), "scatter")


# ------------------------------------------------------------------- algebra

_mac_state = threading.local()


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of tagged matmuls inside the block.

    Yields a dict mapping tag to integer count.
    """
    prev = getattr(_mac_state, "counter", None)
    counter: dict[str, int] = {}
    _mac_state.counter = counter
    try:
        yield counter
    finally:
        _mac_state.counter = prev


def matmul(a, b, tag: str | None = None) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    counter = getattr(_mac_state, "counter", None)
    if counter is not None and tag is not None:
        counter[tag] = counter.get(tag, 0) + int(out.size) * int(a.shape[-1])

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: one flat product instead of a batched one plus a reduction
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def _conv_geometry(h, w, kh, kw, stride, dilation, padding):
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("'same' padding needs odd kernel extents")
        ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    else:
        ph = pw = int(padding)
    ho = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("convolution output would be empty")
    return ph, pw, ho, wo


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding="same") -> Tensor:
    """2-D cross-correlation of a ``(C_in, H, W)`` or ``(N, C_in, H, W)`` map.

    ``k`` has shape ``(C_out, C_in, kh, kw)``; ``padding`` is an integer or
    ``"same"`` (``dilation * (k - 1) / 2`` zeros per side).
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.ndim != 4:
        raise DimensionError("conv2d expects (N,)C,H,W input and O,C,kh,kw kernel")
    n, c, h, w = xd.shape
    o, ck, kh, kw = k.shape
    if ck != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernel {ck}")
    ph, pw, ho, wo = _conv_geometry(h, w, kh, kw, stride, dilation, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    s, d = stride, dilation
    taps = [(i, j) for i in range(kh) for j in range(kw)]

    def tap(arr, i, j):
        return arr[:, :, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s]

    if kh == 1 and kw == 1:
        cols = tap(xp, 0, 0).reshape(n, c, ho * wo)
    else:
        cols = np.stack([tap(xp, i, j) for i, j in taps], axis=2).reshape(n, c * kh * kw, ho * wo)
    wmat = k.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gm = g4.reshape(n, o, ho * wo)
        gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape) if k.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm).reshape(n, c, kh * kw, ho, wo)
            gxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                tap(gxp, i, j)[...] += gcols[:, :, t]
            gx = gxp[:, :, ph: ph + h, pw: pw + w]
            if squeeze:
                gx = gx[0]
        return gx, gk, gb

    inputs = (x, k) if bias is None else (x, k, bias)
    return _make(out, inputs, backward, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean over the last two axes."""
    if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise DimensionError("global_avg_pool expects (..., C, H, W) with H, W >= 1")
    return mean(x, axis=(-2, -1))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes (zero-padded to even)."""
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = pad(x, [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)])
    h2, w2 = x.shape[-2] // 2, x.shape[-1] // 2
    lead = x.shape[:-2]
    r = reshape(x, lead + (h2, 2, w2, 2))
    nd = len(lead)
    return mean(r, axis=(nd + 1, nd + 3))


def _bilinear_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    # half-pixel centers, edge-clamped
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resampling of the last two axes to ``size``."""
    h, w = x.shape[-2:]
    mh = Tensor._wrap(_bilinear_matrix(size[0], h, x.dtype))
    mw = Tensor._wrap(_bilinear_matrix(size[1], w, x.dtype).T.copy())
    return matmul(matmul(mh, x), mw)


def channel_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial extent of each sample."""
    mu = mean(x, axis=(-2, -1), keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=(-2, -1), keepdims=True)
    normed = centered * power(var + eps, -0.5)
    c = x.shape[-3]
    return normed * reshape(scale, (c, 1, 1)) + reshape(shift, (c, 1, 1))


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)

