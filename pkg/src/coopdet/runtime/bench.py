"""Global versus windowed attention: instrumented MAC counts and timings."""

from __future__ import annotations

import csv
import io
import statistics
import time

import numpy as np

from .. import tensor as T
from ..attention import AttentionLayer, attention_layer_forward, global_self_attention
from ..nn import make_rng
from ..tensor import Tensor


def windowed_macs(h: int, w: int, window: int, d: int) -> int:
    return window * window * h * w * d


def global_macs(h: int, w: int, d: int) -> int:
    return (h * w) ** 2 * d


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_attention(sizes=(16, 32, 64), window: int = 4, dim: int = 16, repeats: int = 5, seed: int = 0) -> list[dict]:
    """One row per (size, mode) with QK^T MACs and median wall time in ms."""
    rows = []
    with T.precision(np.float32):
        layer = AttentionLayer(dim, window, 1, dim, make_rng(seed))
        for s in sizes:
            f = Tensor(make_rng(seed, s).normal(size=(1, dim, s, s)))
            with T.count_macs() as win:
                attention_layer_forward(f, layer, 0)
            with T.count_macs() as glob:
                global_self_attention(f, layer)
            t_win = _median_ms(lambda: attention_layer_forward(f, layer, 0), repeats)
            t_glob = _median_ms(lambda: global_self_attention(f, layer), repeats)
            rows.append({"size": s, "mode": "windowed", "macs": win["qk"], "median_ms": t_win})
            rows.append({"size": s, "mode": "global", "macs": glob["qk"], "median_ms": t_glob})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["size", "mode", "macs", "median_ms"], lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({**r, "median_ms": f"{r['median_ms']:.4f}"})
    return buf.getvalue()
