"""Anchors, target assignment, residual coding, class-weighted losses and NMS.

Anchor order is fixed: BEV locations row-major, then class (``CLASSES``
order), then yaw. Box arrays use rows ``[x, y, z, l, w, h, yaw]``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import DomainError, NonFiniteError
from .geometry import CLASSES, BevGrid, Box3D, boxes_to_array
from .tensor import Tensor

TERMS = ("cls", "reg", "dir")


def _per_class(values, name: str) -> dict:
    if isinstance(values, dict):
        out = {c: float(values[c]) for c in CLASSES}
    else:
        out = dict(zip(CLASSES, map(float, values)))
    if len(out) != len(CLASSES) or any(v < 0 for v in out.values()):
        raise DomainError(f"{name} needs a nonnegative value per class")
    return out


@dataclass(frozen=True)
class AnchorConfig:
    sizes: dict = field(default_factory=lambda: {
        "pedestrian": (0.6, 0.6, 1.7),
        "car": (4.0, 2.0, 1.6),
        "truck": (9.6, 2.6, 3.5),
    })
    yaws: tuple[float, ...] = (0.0, math.pi / 2)
    thresholds: dict = field(default_factory=lambda: {
        "pedestrian": (0.35, 0.2),
        "car": (0.5, 0.35),
        "truck": (0.5, 0.35),
    })

    def __post_init__(self):
        sizes = {c: tuple(float(v) for v in self.sizes[c]) for c in CLASSES}
        if any(len(s) != 3 or min(s) <= 0 for s in sizes.values()):
            raise DomainError("anchor sizes must be three positive extents")
        thr = {c: tuple(float(v) for v in self.thresholds[c]) for c in CLASSES}
        if any(not 0 <= neg <= pos <= 1 for pos, neg in thr.values()):
            raise DomainError("matching thresholds need 0 <= neg <= pos <= 1")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "thresholds", thr)
        object.__setattr__(self, "yaws", tuple(float(y) for y in self.yaws))

    @property
    def per_location(self) -> int:
        return len(CLASSES) * len(self.yaws)


@dataclass(frozen=True)
class LossWeights:
    cls: dict = field(default_factory=lambda: {"car": 1.0, "pedestrian": 3.0, "truck": 1.5})
    reg: dict = field(default_factory=lambda: {"car": 1.0, "pedestrian": 2.0, "truck": 1.0})
    dir: dict = field(default_factory=lambda: {"car": 1.0, "pedestrian": 1.0, "truck": 1.0})
    lambdas: tuple[float, float, float] = (1.0, 2.0, 0.2)
    alpha: float = 0.25
    gamma: float = 2.0
    sigma: float = 3.0

    def __post_init__(self):
        for name in TERMS:
            object.__setattr__(self, name, _per_class(getattr(self, name), name))
        lam = tuple(float(v) for v in self.lambdas)
        if len(lam) != 3 or min(lam) < 0:
            raise DomainError("lambdas must be three nonnegative term weights")
        object.__setattr__(self, "lambdas", lam)
        if not 0 <= self.alpha <= 1 or self.gamma < 0 or self.sigma <= 0:
            raise DomainError("focal alpha in [0,1], gamma >= 0 and sigma > 0 required")

    @classmethod
    def uniform(cls, **kw) -> "LossWeights":
        ones = {c: 1.0 for c in CLASSES}
        return cls(cls=ones, reg=ones, dir=ones, **kw)


# ------------------------------------------------------------------ anchors


@dataclass(frozen=True)
class Anchors:
    boxes: np.ndarray      # (A, 7)
    cls: np.ndarray        # (A,) index into CLASSES
    shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.boxes)


def generate_anchors(grid: BevGrid, config: AnchorConfig, stride: int = 1) -> Anchors:
    h = -(-grid.H // stride)
    w = -(-grid.W // stride)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx, cy = grid.cell_center(ii.ravel(), jj.ravel(), stride)
    per_loc = []
    for c in CLASSES:
        l, wd, ht = config.sizes[c]
        for yaw in config.yaws:
            per_loc.append((l, wd, ht, yaw, CLASSES.index(c)))
    proto = np.array(per_loc)
    n_loc, k = len(cx), len(proto)
    boxes = np.empty((n_loc, k, 7))
    boxes[..., 0] = cx[:, None]
    boxes[..., 1] = cy[:, None]
    boxes[..., 2] = proto[None, :, 2] / 2.0
    boxes[..., 3:6] = proto[None, :, 0:3]
    boxes[..., 6] = proto[None, :, 3]
    cls = np.broadcast_to(proto[:, 4].astype(np.int64), (n_loc, k))
    return Anchors(boxes.reshape(-1, 7), cls.reshape(-1).copy(), (h, w))


# ----------------------------------------------------------------- matching


@dataclass
class Assignment:
    labels: np.ndarray     # (A,) 1 positive, 0 negative, -1 ignored
    gt_index: np.ndarray   # (A,) matched GT for positives, else -1

    @property
    def positives(self) -> np.ndarray:
        return np.nonzero(self.labels == 1)[0]


def _bev(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr[:, [0, 1, 3, 4, 6]])


def match_anchors(anchors: Anchors, gt, config: AnchorConfig) -> Assignment:
    """Per-class IoU assignment with best-anchor forcing.

    A GT whose best IoU over its class's anchors is zero is forced onto the
    nearest-center anchor of that class instead.
    """
    gt_arr = boxes_to_array(gt)
    gt_cls = np.array([CLASSES.index(b.label) for b in gt], dtype=np.int64)
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    for ci, c in enumerate(CLASSES):
        a_idx = np.nonzero(anchors.cls == ci)[0]
        g_idx = np.nonzero(gt_cls == ci)[0]
        if len(a_idx) == 0 or len(g_idx) == 0:
            continue
        pos_t, neg_t = config.thresholds[c]
        iou = _kernels.iou_matrix(_bev(anchors.boxes[a_idx]), _bev(gt_arr[g_idx]))
        best_gt = np.argmax(iou, axis=1)
        best = iou[np.arange(len(a_idx)), best_gt]
        lab = np.where(best >= pos_t, 1, np.where(best < neg_t, 0, -1))
        owner = np.where(lab == 1, g_idx[best_gt], -1)
        for k, g in enumerate(g_idx):
            col = iou[:, k]
            if col.max() > 0:
                a = int(np.argmax(col))
            else:
                d = np.hypot(anchors.boxes[a_idx, 0] - gt_arr[g, 0], anchors.boxes[a_idx, 1] - gt_arr[g, 1])
                a = int(np.argmin(d))
            lab[a] = 1
            owner[a] = g
        labels[a_idx] = lab
        gt_index[a_idx] = owner
    return Assignment(labels, gt_index)


# ----------------------------------------------------------------- encoding


def wrap_half_turn(d):
    """Wrap angles to ``(-pi/2, pi/2]``."""
    return d - np.pi * np.ceil((d - np.pi / 2) / np.pi)


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residuals ``(K, 7)`` and direction bins ``(K,)`` for matched rows."""
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    if np.any(gt[:, 3:6] <= 0) or np.any(anchors[:, 3:6] <= 0):
        raise DomainError("box extents must be positive")
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    res = np.empty_like(gt)
    res[:, 0] = (gt[:, 0] - anchors[:, 0]) / diag
    res[:, 1] = (gt[:, 1] - anchors[:, 1]) / diag
    res[:, 2] = (gt[:, 2] - anchors[:, 2]) / anchors[:, 5]
    res[:, 3:6] = np.log(gt[:, 3:6] / anchors[:, 3:6])
    res[:, 6] = wrap_half_turn(gt[:, 6] - anchors[:, 6])
    heading = np.mod(gt[:, 6], 2 * np.pi)
    direction = (heading < np.pi).astype(np.int64)
    return res, direction


def decode_boxes(res: np.ndarray, anchors: np.ndarray, direction: np.ndarray | None = None) -> np.ndarray:
    res = np.atleast_2d(np.asarray(res, dtype=np.float64))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    out = np.empty_like(res)
    out[:, 0] = anchors[:, 0] + res[:, 0] * diag
    out[:, 1] = anchors[:, 1] + res[:, 1] * diag
    out[:, 2] = anchors[:, 2] + res[:, 2] * anchors[:, 5]
    out[:, 3:6] = anchors[:, 3:6] * np.exp(res[:, 3:6])
    yaw = anchors[:, 6] + res[:, 6]
    if direction is None:
        out[:, 6] = yaw
    else:
        yaw = np.mod(yaw, np.pi)
        out[:, 6] = np.where(np.asarray(direction) == 1, yaw, yaw + np.pi)
    return out


# ------------------------------------------------------------------- losses


def focal_loss(p, alpha: float = 0.25, gamma: float = 2.0):
    """``-alpha (1 - p)^gamma log p`` elementwise for probabilities of the true class."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise DomainError("focal loss needs probabilities in (0, 1]")
    return -alpha * (1.0 - p) ** gamma * np.log(p)


def smooth_l1_loss(d, sigma: float = 3.0):
    d = np.abs(np.asarray(d, dtype=np.float64))
    s2 = sigma * sigma
    return np.where(d < 1.0 / s2, 0.5 * s2 * d * d, d - 0.5 / s2)


def effective_number_weights(counts, beta: float):
    """``(1 - beta) / (1 - beta**n)`` per class, normalized to mean one."""
    if not 0 <= beta < 1:
        raise DomainError("beta must lie in [0, 1)")
    keys = list(counts) if isinstance(counts, dict) else None
    n = np.array([counts[k] for k in keys] if keys else counts, dtype=np.float64)
    if np.any(n < 1):
        raise DomainError("class counts must be >= 1")
    raw = (1.0 - beta) / (1.0 - beta ** n)
    w = raw / raw.mean()
    return dict(zip(keys, w.tolist())) if keys else w


@dataclass
class Targets:
    """Flattened training targets over one or more samples' anchors."""

    labels: np.ndarray      # (A,) 1/0/-1
    cls: np.ndarray         # (A,) anchor class index
    reg: np.ndarray         # (P, 7) for positives, in positive order
    direction: np.ndarray   # (P,)

    @property
    def positives(self) -> np.ndarray:
        return np.nonzero(self.labels == 1)[0]

    @staticmethod
    def concat(parts: list["Targets"]) -> "Targets":
        if not parts:
            return Targets(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 7)), np.zeros(0, np.int64))
        return Targets(
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.cls for p in parts]),
            np.concatenate([p.reg for p in parts]),
            np.concatenate([p.direction for p in parts]),
        )


def build_targets(anchors: Anchors, gt, config: AnchorConfig) -> Targets:
    assign = match_anchors(anchors, gt, config)
    pos = assign.positives
    gt_arr = boxes_to_array(gt)
    if len(pos):
        reg, direction = encode_boxes(gt_arr[assign.gt_index[pos]], anchors.boxes[pos])
    else:
        reg, direction = np.zeros((0, 7)), np.zeros(0, np.int64)
    return Targets(assign.labels, anchors.cls.copy(), reg, direction)


@dataclass
class LossResult:
    total: Tensor
    terms: dict             # class -> term -> unweighted value
    weighted: dict          # class -> term -> weighted contribution
    n_pos: int
    no_positives: bool

    def as_dict(self) -> dict:
        return {"total": self.total.item(), "n_pos": self.n_pos, "terms": self.terms, "weighted": self.weighted}


def _focal_terms(logits: Tensor, labels: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Per-anchor focal loss from logits; ignored anchors contribute zero."""
    sign = np.where(labels == 1, 1.0, -1.0).astype(logits.dtype)
    z = logits * sign
    log_p = -T.softplus(-z)
    loss = -log_p
    if gamma != 0:
        loss = loss * T.power(T.sigmoid(-z), gamma)
    a = np.where(labels == 1, alpha, 1.0 - alpha) * (labels >= 0)
    return loss * a.astype(logits.dtype)


@contextlib.contextmanager
def _naming(term: str, label: str | None = None):
    try:
        yield
    except NonFiniteError as exc:
        where = f"{term} loss" + (f" for class {label}" if label else "")
        raise NonFiniteError(f"non-finite {where}: {exc}") from exc


def total_loss(cls_logits: Tensor, reg: Tensor, dir_logits: Tensor, targets: Targets,
               weights: LossWeights) -> LossResult:
    """Class-weighted sum of focal, smooth-L1 and direction terms.

    ``cls_logits`` is ``(A,)``, ``reg`` is ``(A, 7)``, ``dir_logits`` is
    ``(A, 2)``; every term is normalized by the positive count (min 1).
    """
    pos = targets.positives
    n_pos = len(pos)
    zero = {c: {t: 0.0 for t in TERMS} for c in CLASSES}
    if len(targets.labels) == 0:
        total = T.sum_(cls_logits) * 0.0
        return LossResult(total, zero, {c: dict(v) for c, v in zero.items()}, 0, True)
    norm = 1.0 / max(n_pos, 1)
    dtype = cls_logits.dtype
    with _naming("cls"):
        focal = _focal_terms(cls_logits, targets.labels, weights.alpha, weights.gamma)
    if n_pos:
        with _naming("reg"):
            pred = T.getitem(reg, pos)
            sl1 = T.sum_(T.smooth_l1(pred - targets.reg.astype(dtype), weights.sigma), axis=1)
        with _naming("dir"):
            logp = T.log_softmax_lastdim(T.getitem(dir_logits, pos))
            ce = -T.getitem(logp, (np.arange(n_pos), targets.direction))
        pos_cls = targets.cls[pos]
    lam = dict(zip(TERMS, weights.lambdas))
    total = None
    terms, weighted = {}, {}
    for ci, c in enumerate(CLASSES):
        with _naming("cls", c):
            per = {"cls": T.sum_(focal * (targets.cls == ci).astype(dtype)) * norm}
        if n_pos:
            m = (pos_cls == ci).astype(dtype)
            with _naming("reg", c):
                per["reg"] = T.sum_(sl1 * m) * norm
            with _naming("dir", c):
                per["dir"] = T.sum_(ce * m) * norm
        terms[c], weighted[c] = {}, {}
        for t in TERMS:
            if t not in per:
                terms[c][t] = weighted[c][t] = 0.0
                continue
            w = lam[t] * getattr(weights, t)[c]
            with _naming(t, c):
                contrib = per[t] * w
                total = contrib if total is None else total + contrib
            terms[c][t] = per[t].item()
            weighted[c][t] = contrib.item()
    return LossResult(total, terms, weighted, n_pos, n_pos == 0)


def check_finite_terms(result: LossResult) -> None:
    """Raise naming the first non-finite loss term."""
    for c, per in result.terms.items():
        for t, v in per.items():
            if not math.isfinite(v):
                raise NonFiniteError(f"non-finite {t} loss for class {c}")
    if not math.isfinite(result.total.item()):
        raise NonFiniteError("non-finite total loss")


# --------------------------------------------------------------- inference


def decode_predictions(cls_logits: np.ndarray, reg: np.ndarray, dir_logits: np.ndarray, anchors: Anchors,
                       score_threshold: float = 0.1) -> list[Box3D]:
    scores = 1.0 / (1.0 + np.exp(-np.asarray(cls_logits, dtype=np.float64)))
    keep = np.nonzero(scores >= score_threshold)[0]
    if len(keep) == 0:
        return []
    direction = np.argmax(dir_logits[keep], axis=1)
    boxes = decode_boxes(reg[keep], anchors.boxes[keep], direction)
    return [Box3D(tuple(b[:3]), tuple(b[3:6]), float(b[6]), CLASSES[anchors.cls[k]], float(s))
            for b, k, s in zip(boxes, keep, scores[keep])]


def nms_per_class(detections: list[Box3D], iou_threshold: float = 0.15) -> list[Box3D]:
    """Greedy rotated-BEV suppression within each class.

    Survivors come back ordered by descending score (stable on input index).
    """
    if not detections:
        return []
    scores = np.array([d.score for d in detections])
    labels = np.array([d.label for d in detections])
    arr = boxes_to_array(detections)
    kept = []
    for c in CLASSES:
        idx = np.nonzero(labels == c)[0]
        if len(idx) == 0:
            continue
        order = idx[np.argsort(-scores[idx], kind="stable")]
        mask = _kernels.nms_keep(_bev(arr[order]), float(iou_threshold))
        kept.extend(order[np.asarray(mask, dtype=bool)].tolist())
    kept.sort(key=lambda i: (-scores[i], i))
    return [detections[i] for i in kept]
