"""Compiled versus pure-Python rotated IoU and NMS kernels.

Usage: python3 benchmarks/bench_kernels.py [--sizes 16,64,256] [--repeats 5] [--out kernels.csv]
"""

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from coopdet import _kernels


def random_boxes(rng, n):
    xy = rng.uniform(-20, 20, size=(n, 2))
    lw = rng.uniform(0.5, 5.0, size=(n, 2))
    yaw = rng.uniform(-np.pi, np.pi, size=(n, 1))
    return np.hstack([xy, lw, yaw])


def median_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="16,64,256")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    if _kernels.c_impl is None:
        print("compiled kernels are not built; run pip install -e . first", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    for n in (int(s) for s in args.sizes.split(",")):
        boxes = random_boxes(rng, n)
        for kernel in ("iou_matrix", "nms_keep"):
            timings = {}
            for name, impl in (("cython", _kernels.c_impl), ("python", _kernels.py_impl)):
                if kernel == "iou_matrix":
                    fn = lambda impl=impl: impl.iou_matrix(boxes, boxes)
                else:
                    fn = lambda impl=impl: impl.nms_keep(boxes, 0.15)
                timings[name] = median_ms(fn, args.repeats)
            if kernel == "iou_matrix":
                diff = np.abs(_kernels.c_impl.iou_matrix(boxes, boxes) - _kernels.py_impl.iou_matrix(boxes, boxes)).max()
            else:
                diff = np.sum(_kernels.c_impl.nms_keep(boxes, 0.15) != _kernels.py_impl.nms_keep(boxes, 0.15))
            rows.append({"n": n, "kernel": kernel, "cython_ms": f"{timings['cython']:.4f}",
                         "python_ms": f"{timings['python']:.4f}",
                         "speedup": f"{timings['python'] / max(timings['cython'], 1e-9):.1f}",
                         "max_abs_diff": f"{diff:.2e}"})
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        out.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
