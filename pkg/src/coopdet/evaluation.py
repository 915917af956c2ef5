"""Detection metrics: region filtering, greedy matching, AP/mAP, range bins.

Reports are plain JSON: class keys ``pedestrian``/``car``/``truck``,
metrics as fractions, and range bins keyed ``"0-30"``, ``"30-60"``,
``"60-100"``. A class with no ground truth has AP ``null`` and is left out
of the mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .geometry import CLASSES, Box3D, boxes_to_array, iou_matrix_3d, iou_matrix_bev


@dataclass(frozen=True)
class EvalConfig:
    x_range: tuple[float, float] = (-100.0, 100.0)
    y_range: tuple[float, float] = (-40.0, 40.0)
    thresholds: tuple[float, ...] = (0.3, 0.5)
    range_bins: tuple[tuple[float, float], ...] = ((0.0, 30.0), (30.0, 60.0), (60.0, 100.0))
    range_threshold: float = 0.5
    iou: str = "bev"
    interpolation: str = "all"

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(map(float, self.x_range)))
        object.__setattr__(self, "y_range", tuple(map(float, self.y_range)))
        object.__setattr__(self, "thresholds", tuple(map(float, self.thresholds)))
        bins = tuple((float(lo), float(hi)) for lo, hi in self.range_bins)
        if any(hi <= lo for lo, hi in bins) or any(b[0] != a[1] for a, b in zip(bins, bins[1:])):
            raise DomainError("range bins must be ordered, contiguous and non-empty")
        object.__setattr__(self, "range_bins", bins)
        if self.iou not in ("bev", "3d"):
            raise DomainError(f"iou flavor must be 'bev' or '3d', got {self.iou!r}")
        if self.interpolation not in ("all", "11", "40"):
            raise DomainError("interpolation must be 'all', '11' or '40'")

    @property
    def bin_keys(self) -> list[str]:
        return [f"{lo:g}-{hi:g}" for lo, hi in self.range_bins]


def filter_region(boxes: list[Box3D], config: EvalConfig = EvalConfig()) -> list[Box3D]:
    (x0, x1), (y0, y1) = config.x_range, config.y_range
    return [b for b in boxes if x0 <= b.center[0] < x1 and y0 <= b.center[1] < y1]


def range_bin(distance: float, config: EvalConfig) -> int:
    """Index of the distance bin; the last bin also takes anything beyond it."""
    for k, (lo, hi) in enumerate(config.range_bins):
        if lo <= distance < hi:
            return k
    return len(config.range_bins) - 1 if distance >= config.range_bins[-1][0] else -1


# ------------------------------------------------------------------ matching


def _iou(dets: list[Box3D], gts: list[Box3D], flavor: str) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    fn = iou_matrix_bev if flavor == "bev" else iou_matrix_3d
    return fn(boxes_to_array(dets), boxes_to_array(gts))


def score_order(scores) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


@dataclass
class MatchResult:
    tp: np.ndarray          # (n_det,) bool, in input order
    gt_match: np.ndarray    # (n_gt,) matched detection index or -1


def greedy_match(dets: list[Box3D], gts: list[Box3D], iou_threshold: float, flavor: str = "bev",
                 iou: np.ndarray | None = None) -> MatchResult:
    """Highest-score-first matching to the best unmatched GT above threshold."""
    iou = _iou(dets, gts, flavor) if iou is None else iou
    tp = np.zeros(len(dets), dtype=bool)
    gt_match = np.full(len(gts), -1, dtype=np.int64)
    if not gts:
        return MatchResult(tp, gt_match)
    for d in score_order([b.score for b in dets]):
        row = np.where(gt_match < 0, iou[d], -1.0)
        g = int(np.argmax(row))
        if row[g] >= iou_threshold:
            tp[d] = True
            gt_match[g] = d
    return MatchResult(tp, gt_match)


# ------------------------------------------------------------------------ AP


def average_precision(tp, scores, n_gt: int, interpolation: str = "all") -> float | None:
    """Area under the interpolated precision/recall curve; ``None`` if ``n_gt == 0``."""
    if n_gt < 0:
        raise DomainError("n_gt must be nonnegative")
    if n_gt == 0:
        return None
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    order = score_order(scores)
    hits = tp[order].astype(np.float64)
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "all":
        steps = np.diff(np.concatenate([[0.0], recall]))
        return float(np.sum(steps * envelope))
    levels = np.linspace(0.0, 1.0, 11) if interpolation == "11" else np.linspace(1 / 40, 1.0, 40)
    vals = []
    for r in levels:
        idx = np.searchsorted(recall, r, side="left")
        vals.append(envelope[idx] if idx < len(recall) else 0.0)
    return float(np.mean(vals))


def mean_ap(aps: dict) -> float | None:
    """Unweighted mean over classes whose AP is defined."""
    present = [v for v in aps.values() if v is not None]
    return float(sum(present) / len(present)) if present else None


# -------------------------------------------------------------------- report


@dataclass
class EvalReport:
    per_class: dict
    map: dict
    ranges: dict
    absent: list = field(default_factory=list)
    iou: str = "bev"

    def to_dict(self) -> dict:
        return {"iou": self.iou, "per_class": self.per_class, "map": self.map,
                "ranges": self.ranges, "absent": list(self.absent)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(per_class=d["per_class"], map=d["map"], ranges=d["ranges"],
                   absent=list(d.get("absent", [])), iou=d.get("iou", "bev"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def ap(self, label: str, threshold: float = 0.5):
        return self.per_class[label][f"ap@{threshold:g}"]


@dataclass
class _ClassPool:
    scores: list = field(default_factory=list)
    tp: list = field(default_factory=list)
    n_gt: int = 0


def _distance(b: Box3D) -> float:
    return math.hypot(b.center[0], b.center[1])


def evaluate(scene_dets: list[list[Box3D]], scene_gts: list[list[Box3D]],
             config: EvalConfig = EvalConfig()) -> EvalReport:
    """Match per scene and class, pool across scenes, then compute AP."""
    if len(scene_dets) != len(scene_gts):
        raise DomainError(f"{len(scene_dets)} detection lists for {len(scene_gts)} scenes")
    thr = config.thresholds
    pools = {(c, t): _ClassPool() for c in CLASSES for t in thr}
    n_bins = len(config.range_bins)
    bin_pools = {(c, k): _ClassPool() for c in CLASSES for k in range(n_bins)}
    for dets, gts in zip(scene_dets, scene_gts):
        dets, gts = filter_region(dets, config), filter_region(gts, config)
        for c in CLASSES:
            d_c = [b for b in dets if b.label == c]
            g_c = [b for b in gts if b.label == c]
            iou = _iou(d_c, g_c, config.iou)
            scores = [b.score for b in d_c]
            for t in thr:
                m = greedy_match(d_c, g_c, t, config.iou, iou)
                pool = pools[(c, t)]
                pool.scores += scores
                pool.tp += m.tp.tolist()
                pool.n_gt += len(g_c)
            m = greedy_match(d_c, g_c, config.range_threshold, config.iou, iou)
            g_bin = [range_bin(_distance(g), config) for g in g_c]
            for k in g_bin:
                if k >= 0:
                    bin_pools[(c, k)].n_gt += 1
            owner = {int(d): g for g, d in enumerate(m.gt_match) if d >= 0}
            for d, box in enumerate(d_c):
                k = g_bin[owner[d]] if d in owner else range_bin(_distance(box), config)
                if k >= 0:
                    bin_pools[(c, k)].scores.append(box.score)
                    bin_pools[(c, k)].tp.append(bool(m.tp[d]))

    per_class, absent = {}, []
    for c in CLASSES:
        entry = {}
        for t in thr:
            p = pools[(c, t)]
            entry[f"ap@{t:g}"] = average_precision(p.tp, p.scores, p.n_gt, config.interpolation)
            entry[f"tp@{t:g}"] = int(sum(p.tp))
            entry[f"fp@{t:g}"] = int(len(p.tp) - sum(p.tp))
        entry["n_gt"] = pools[(c, thr[0])].n_gt
        if entry["n_gt"] == 0:
            absent.append(c)
        per_class[c] = entry
    maps = {f"map@{t:g}": mean_ap({c: per_class[c][f"ap@{t:g}"] for c in CLASSES}) for t in thr}

    ranges = {}
    rt = f"{config.range_threshold:g}"
    for k, key in enumerate(config.bin_keys):
        pc = {}
        for c in CLASSES:
            p = bin_pools[(c, k)]
            pc[c] = {f"ap@{rt}": average_precision(p.tp, p.scores, p.n_gt, config.interpolation),
                     "n_gt": p.n_gt, "tp": int(sum(p.tp)), "fp": int(len(p.tp) - sum(p.tp))}
        ranges[key] = {"per_class": pc, "map": mean_ap({c: pc[c][f"ap@{rt}"] for c in CLASSES})}
    return EvalReport(per_class, maps, ranges, absent, config.iou)


def range_stratified(dets: list[Box3D], gts: list[Box3D], config: EvalConfig = EvalConfig()) -> dict:
    """The per-bin section of the report for a single scene."""
    return evaluate([dets], [gts], config).ranges


# ------------------------------------------------------------ detection I/O


def box_to_record(b: Box3D) -> dict:
    return {"c": list(map(float, b.center)), "s": list(map(float, b.size)), "yaw": float(b.yaw),
            "class": b.label, "score": float(b.score)}


def box_from_record(r: dict) -> Box3D:
    return Box3D(tuple(r["c"]), tuple(r["s"]), float(r["yaw"]), r["class"], float(r.get("score", 1.0)))


def dets_to_json(scene_seeds: list[int], scene_dets: list[list[Box3D]]) -> str:
    doc = [{"seed": int(s), "detections": [box_to_record(b) for b in dets]}
           for s, dets in zip(scene_seeds, scene_dets)]
    return json.dumps(doc, separators=(",", ":"))


def dets_from_json(text: str) -> tuple[list[int], list[list[Box3D]]]:
    doc = json.loads(text)
    return [int(e["seed"]) for e in doc], [[box_from_record(r) for r in e["detections"]] for e in doc]
