"""Pure-Python rotated-rectangle kernels (fallback for the compiled module).

Boxes are rows ``(x, y, length, width, yaw)``; length runs along the heading.
"""

from __future__ import annotations

import math

import numpy as np


def corners(x: float, y: float, l: float, w: float, yaw: float) -> list[tuple[float, float]]:
    """Footprint corners in counter-clockwise order."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    return [(x + c * px - s * py, y + s * px + c * py)
            for px, py in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))]


def _clip(subject, ax, ay, bx, by):
    # keep the part of ``subject`` left of the directed edge a->b
    out = []
    n = len(subject)
    ex, ey = bx - ax, by - ay
    for i in range(n):
        px, py = subject[i]
        qx, qy = subject[(i + 1) % n]
        sp = ex * (py - ay) - ey * (px - ax)
        sq = ex * (qy - ay) - ey * (qx - ax)
        if sp >= 0:
            out.append((px, py))
        if (sp >= 0) != (sq >= 0):
            t = sp / (sp - sq)
            out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def polygon_area(poly) -> float:
    n = len(poly)
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * abs(acc)


def intersection_area(a, b) -> float:
    ax, ay, al, aw, ayaw = a
    bx, by, bl, bw, byaw = b
    reach = 0.5 * (math.hypot(al, aw) + math.hypot(bl, bw))
    if (ax - bx) ** 2 + (ay - by) ** 2 > reach * reach:
        return 0.0
    poly = corners(ax, ay, al, aw, ayaw)
    clip = corners(bx, by, bl, bw, byaw)
    for i in range(4):
        if not poly:
            return 0.0
        x0, y0 = clip[i]
        x1, y1 = clip[(i + 1) % 4]
        poly = _clip(poly, x0, y0, x1, y1)
    return polygon_area(poly) if len(poly) >= 3 else 0.0


def pair_iou(a, b) -> float:
    inter = intersection_area(a, b)
    union = a[2] * a[3] + b[2] * b[3] - inter
    if inter <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    rows_b = [tuple(map(float, r)) for r in b]
    for i, ra in enumerate(a):
        ra = tuple(map(float, ra))
        for j, rb in enumerate(rows_b):
            out[i, j] = pair_iou(ra, rb)
    return out


def intersection_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    rows_b = [tuple(map(float, r)) for r in b]
    for i, ra in enumerate(a):
        ra = tuple(map(float, ra))
        for j, rb in enumerate(rows_b):
            out[i, j] = intersection_area(ra, rb)
    return out


def nms_keep(boxes: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy suppression over boxes already sorted by priority."""
    n = len(boxes)
    rows = [tuple(map(float, r)) for r in boxes]
    suppressed = [False] * n
    keep = np.zeros(n, dtype=bool)
    for i in range(n):
        if suppressed[i]:
            continue
        keep[i] = True
        for j in range(i + 1, n):
            if not suppressed[j] and pair_iou(rows[i], rows[j]) > threshold:
                suppressed[j] = True
    return keep
