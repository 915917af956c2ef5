"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import EvaluationError, NonFiniteError
from .tensor import Tape, Tensor


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


@dataclass
class GradEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


@dataclass
class GradReport:
    entries: list[GradEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def worst(self) -> GradEntry | None:
        return max(self.entries, key=lambda e: e.rel_error, default=None)

    def by_param(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.name] = max(out.get(e.name, 0.0), e.rel_error)
        return out


def _evaluate(f: Callable[[], Tensor]) -> float:
    try:
        value = f()
    except NonFiniteError as exc:
        raise EvaluationError(f"function is not finite at the probe point: {exc}") from exc
    v = float(np.asarray(value.data).reshape(()))
    if not np.isfinite(v):
        raise EvaluationError("function returned a non-finite value")
    return v


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor] | Mapping[str, Tensor],
               step: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``params`` are perturbed in place and restored. With ``max_entries`` set,
    each parameter is probed at that many entries drawn from the half with the
    largest analytic magnitude (tiny gradients only measure round-off).
    """
    named = dict(params) if isinstance(params, Mapping) else {f"p{i}": p for i, p in enumerate(params)}
    for name, p in named.items():
        if p.dtype != np.float64:
            raise EvaluationError(f"gradient checks need float64 parameters ({name} is {p.dtype})")

    with Tape() as tape:
        try:
            out = f()
        except NonFiniteError as exc:
            raise EvaluationError(str(exc)) from exc
    grads = tape.gradient(out, list(named.values()))

    report = GradReport()
    rng = rng or np.random.default_rng(0)
    for (name, p), g in zip(named.items(), grads):
        flat_idx = np.arange(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            order = np.argsort(-np.abs(g.ravel()), kind="stable")
            pool = order[: max(max_entries, p.data.size // 2)]
            flat_idx = np.sort(rng.choice(pool, size=max_entries, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + step
            plus = _evaluate(f)
            p.data[idx] = orig - step
            minus = _evaluate(f)
            p.data[idx] = orig
            numeric = (plus - minus) / (2 * step)
            report.entries.append(GradEntry(name, tuple(int(i) for i in idx), float(g[idx]), numeric))
    return report


def _op_cases(rng: np.random.Generator) -> dict:
    """Small random instances of every differentiable op, keyed by op name."""
    from . import tensor as T

    def rand(*shape, positive=False, away=False):
        x = rng.normal(size=shape)
        if positive:
            x = np.abs(x) + 0.5
        if away:
            x = np.where(np.abs(x) < 0.05, 0.3, x)
        return Tensor(x, requires_grad=True)

    a, b = rand(3, 4), rand(4)
    c, d = rand(2, 3), rand(2, 3, positive=True)
    e = rand(3, 5)
    f = rand(2, 2, 5, 4)
    k = rand(3, 2, 3, 3)
    s = rand(3, 4, 4)
    sc = rand(3)
    m = rand(4, 2)
    cases = {
        "add": (lambda: T.add(a, b), [a, b]),
        "sub": (lambda: T.sub(b, a), [a, b]),
        "mul": (lambda: T.mul(c, d), [c, d]),
        "div": (lambda: T.div(c, d), [c, d]),
        "neg": (lambda: T.neg(a), [a]),
        "power": (lambda: T.power(d, -0.5), [d]),
        "exp": (lambda: T.exp(c), [c]),
        "log": (lambda: T.log(d), [d]),
        "relu": (lambda: T.relu(r), [r := rand(3, 4, away=True)]),
        "sigmoid": (lambda: T.sigmoid(a), [a]),
        "softplus": (lambda: T.softplus(a), [a]),
        "smooth_l1": (lambda: T.smooth_l1(q, 3.0), [q := rand(10, away=True)]),
        "where": (lambda: T.where(np.arange(12).reshape(3, 4) % 2 == 0, a, e[:, :4]), [a, e]),
        "sum": (lambda: T.sum_(f, axis=1), [f]),
        "mean": (lambda: T.mean(f, axis=(0, 2), keepdims=True), [f]),
        "max": (lambda: T.max_(e, axis=1), [e]),
        "softmax": (lambda: T.softmax_lastdim(e), [e]),
        "log_softmax": (lambda: T.log_softmax_lastdim(e), [e]),
        "reshape": (lambda: T.reshape(a, (2, 6)), [a]),
        "transpose": (lambda: T.transpose(f, (2, 0, 3, 1)), [f]),
        "getitem": (lambda: e[np.array([0, 2, 2]), 1:4], [e]),
        "concat": (lambda: T.concat([a, e[:, :4]], axis=0), [a, e]),
        "stack": (lambda: T.stack([c, d], axis=1), [c, d]),
        "pad": (lambda: T.pad(c, [(1, 0), (2, 1)]), [c]),
        "roll": (lambda: T.roll(e, (1, -2), (0, 1)), [e]),
        "scatter": (lambda: T.scatter(c, (np.array([0, 3]), slice(None)), (5, 3)), [c]),
        "matmul": (lambda: T.matmul(f, m), [f, m]),
        "conv2d": (lambda: T.conv2d(f, k, stride=2, dilation=1), [f, k]),
        "conv2d_dilated": (lambda: T.conv2d(f, k, sc, dilation=2), [f, k, sc]),
        "global_avg_pool": (lambda: T.global_avg_pool(s), [s]),
        "avg_pool2": (lambda: T.avg_pool2(s), [s]),
        "resize_bilinear": (lambda: T.resize_bilinear(s, (6, 5)), [s]),
        "channel_norm": (lambda: T.channel_norm(s, sc, Tensor(np.zeros(3))), [s, sc]),
    }
    return cases


def run_op_suite(seed: int = 0) -> dict[str, GradReport]:
    """Gradient-check every differentiable op against central differences.

    Each output is contracted with fixed random weights so every output entry
    contributes to the scalar being differentiated.
    """
    from . import tensor as T

    rng = np.random.default_rng(seed)
    reports = {}
    with T.precision(np.float64):
        for name, (fn, params) in _op_cases(rng).items():
            w = Tensor(rng.normal(size=fn().shape))
            reports[name] = grad_check(lambda: (fn() * w).sum(), params)
    return reports
