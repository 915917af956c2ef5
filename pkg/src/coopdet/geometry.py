"""Ground-plane poses, oriented boxes, point clouds, IoU and pillarization."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import DomainError
from .tensor import Tensor

CLASSES = ("pedestrian", "car", "truck")
TWO_PI = 2.0 * math.pi


def wrap_angle(yaw: float) -> float:
    """Map an angle to [0, 2*pi)."""
    y = math.fmod(yaw, TWO_PI)
    if y < 0:
        y += TWO_PI
    return 0.0 if y >= TWO_PI else y


@dataclass(frozen=True)
class Pose:
    """Rigid ground-plane transform: rotate by ``yaw`` about z, then translate."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.translation
        return m

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation().T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """The transform applying ``other`` first, then ``self``."""
        t = self.rotation() @ other.translation + self.translation
        return Pose(t[0], t[1], t[2], self.yaw + other.yaw)

    def inverse(self) -> "Pose":
        t = -(self.rotation().T @ self.translation)
        return Pose(t[0], t[1], t[2], -self.yaw)


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    label: str
    score: float = 1.0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise DomainError("box center and size need three components")
        if not all(s > 0 for s in size):
            raise DomainError(f"box extents must be positive, got {size}")
        if self.label not in CLASSES:
            raise DomainError(f"unknown class {self.label!r}")
        if not 0.0 <= self.score <= 1.0:
            raise DomainError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "score", float(self.score))

    def as_array(self) -> np.ndarray:
        """``[x, y, z, l, w, h, yaw]``."""
        return np.array([*self.center, *self.size, self.yaw])

    @classmethod
    def from_array(cls, row, label: str, score: float = 1.0) -> "Box3D":
        row = [float(v) for v in row]
        return cls(tuple(row[:3]), tuple(row[3:6]), row[6], label, score)

    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]


@dataclass(frozen=True)
class PointCloud:
    """``points`` is an ``(M, 4)`` array of x, y, z, intensity."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(pts)):
            raise DomainError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, PointCloud) and np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class BevGrid:
    x_range: tuple[float, float] = (-25.6, 25.6)
    y_range: tuple[float, float] = (-6.4, 6.4)
    cell: float = 0.4
    z_range: tuple[float, float] = (-0.5, 3.5)

    def __post_init__(self):
        if self.cell <= 0:
            raise DomainError("cell size must be positive")
        for lo, hi in (self.x_range, self.y_range):
            n = (hi - lo) / self.cell
            if hi <= lo or abs(n - round(n)) > 1e-6:
                raise DomainError(f"extent [{lo}, {hi}) is not a positive multiple of {self.cell}")

    @property
    def H(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell))

    @property
    def W(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell))

    def cell_index(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        i = np.floor((np.asarray(x) - self.x_range[0]) / self.cell).astype(np.int64)
        j = np.floor((np.asarray(y) - self.y_range[0]) / self.cell).astype(np.int64)
        return i, j

    def cell_center(self, i, j, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        c = self.cell * stride
        return self.x_range[0] + (np.asarray(i) + 0.5) * c, self.y_range[0] + (np.asarray(j) + 0.5) * c


def transform_points(pose: Pose, pc: PointCloud) -> PointCloud:
    pts = pc.points.copy()
    pts[:, :3] = pose.apply(pc.points[:, :3])
    return PointCloud(pts)


def transform_box(pose: Pose, box: Box3D) -> Box3D:
    c = pose.apply(np.array(box.center))
    return dataclasses.replace(box, center=tuple(c), yaw=box.yaw + pose.yaw)


# ---------------------------------------------------------------------- IoU


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def _bev_rows(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 7)
    return np.ascontiguousarray(arr[:, [0, 1, 3, 4, 6]])


def _check_extent(arr: np.ndarray) -> None:
    if np.any(arr[:, 3:6] <= 0):
        raise DomainError("degenerate box with non-positive extent")


def iou_matrix_bev(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotated BEV IoU between rows ``[x, y, z, l, w, h, yaw]`` of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    _check_extent(a)
    _check_extent(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    return _kernels.iou_matrix(_bev_rows(a), _bev_rows(b))


def iou_matrix_3d(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    _check_extent(a)
    _check_extent(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    inter_bev = _kernels.intersection_matrix(_bev_rows(a), _bev_rows(b))
    top = np.minimum((a[:, 2] + a[:, 5] / 2)[:, None], (b[:, 2] + b[:, 5] / 2)[None])
    bottom = np.maximum((a[:, 2] - a[:, 5] / 2)[:, None], (b[:, 2] - b[:, 5] / 2)[None])
    inter = inter_bev * np.clip(top - bottom, 0.0, None)
    vol_a = (a[:, 3] * a[:, 4] * a[:, 5])[:, None]
    vol_b = (b[:, 3] * b[:, 4] * b[:, 5])[None]
    return np.clip(inter / (vol_a + vol_b - inter), 0.0, 1.0)


def bev_iou_rotated(a: Box3D, b: Box3D) -> float:
    return float(iou_matrix_bev(a.as_array(), b.as_array())[0, 0])


def iou3d(a: Box3D, b: Box3D) -> float:
    return float(iou_matrix_3d(a.as_array(), b.as_array())[0, 0])


# ------------------------------------------------------------ pillarization


@dataclass
class PillarSet:
    """Decorated points of the nonempty cells kept after the pillar limit.

    ``features`` is ``(P, max_points, 9)`` zero-padded per pillar; ``coords``
    holds ``(i, j)`` grid indices; ``mask`` flags real points.
    """

    features: np.ndarray
    mask: np.ndarray
    coords: np.ndarray
    kept: int
    truncated: int
    out_of_grid: int

    def __len__(self) -> int:
        return len(self.coords)


def pillarize_and_encode(pc: PointCloud, grid: BevGrid, max_points: int = 32,
                         max_pillars: int = 64000) -> PillarSet:
    pts = pc.points
    m = len(pts)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inside = ((x >= grid.x_range[0]) & (x < grid.x_range[1]) & (y >= grid.y_range[0]) & (y < grid.y_range[1])
              & (z >= grid.z_range[0]) & (z < grid.z_range[1]))
    i, j = grid.cell_index(x, y)
    # float round-off at the upper edge can land one cell past the end
    inside &= (i >= 0) & (i < grid.H) & (j >= 0) & (j < grid.W)
    out_of_grid = int(m - inside.sum())
    src = np.nonzero(inside)[0]
    if len(src) == 0:
        return PillarSet(np.zeros((0, max_points, 9)), np.zeros((0, max_points), bool),
                         np.zeros((0, 2), np.int64), 0, 0, out_of_grid)

    cell = i[src] * grid.W + j[src]
    order = np.argsort(cell, kind="stable")
    src, cell = src[order], cell[order]
    uniq, start, counts = np.unique(cell, return_index=True, return_counts=True)
    chosen = np.lexsort((uniq, -counts))[:max_pillars]
    chosen.sort()
    uniq, start, counts = uniq[chosen], start[chosen], counts[chosen]

    n_keep = np.minimum(counts, max_points)
    pillar_of = np.repeat(np.arange(len(uniq)), n_keep)
    slot = np.arange(n_keep.sum()) - np.repeat(np.cumsum(n_keep) - n_keep, n_keep)
    rows = src[np.repeat(start, n_keep) + slot]
    kept_pts = pts[rows]

    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, pillar_of, kept_pts[:, :3])
    means = sums / n_keep[:, None]
    ci, cj = uniq // grid.W, uniq % grid.W
    cx, cy = grid.cell_center(ci, cj)

    feats = np.zeros((len(uniq), max_points, 9))
    mask = np.zeros((len(uniq), max_points), dtype=bool)
    deco = np.concatenate([
        kept_pts,
        kept_pts[:, :3] - means[pillar_of],
        kept_pts[:, :1] - cx[pillar_of, None],
        kept_pts[:, 1:2] - cy[pillar_of, None],
    ], axis=1)
    feats[pillar_of, slot] = deco
    mask[pillar_of, slot] = True
    kept = int(n_keep.sum())
    return PillarSet(feats, mask, np.stack([ci, cj], axis=1), kept, int(len(src) - kept), out_of_grid)


def scatter_to_bev(coords: np.ndarray, features: Tensor, grid: BevGrid) -> Tensor:
    """Place per-pillar feature vectors ``(P, C)`` into a dense ``(C, H, W)`` map."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    c = features.shape[-1]
    if len(coords) and (coords.min() < 0 or coords[:, 0].max() >= grid.H or coords[:, 1].max() >= grid.W):
        raise RuntimeError("pillar index outside the BEV grid")
    index = (slice(None), coords[:, 0], coords[:, 1])
    return T.scatter(T.transpose(features), index, (c, grid.H, grid.W))


# ------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class Augmentation:
    flip: bool = False
    rotation: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise DomainError("augmentation scale must be positive")

    def apply_xyz(self, xyz: np.ndarray) -> np.ndarray:
        out = np.array(xyz, dtype=np.float64, copy=True)
        if self.flip:
            out[..., 1] = -out[..., 1]
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        x, y = out[..., 0].copy(), out[..., 1].copy()
        out[..., 0] = c * x - s * y
        out[..., 1] = s * x + c * y
        return out * self.scale

    def apply_yaw(self, yaw: float) -> float:
        return (-yaw if self.flip else yaw) + self.rotation

    def apply_box(self, box: Box3D) -> Box3D:
        c = self.apply_xyz(np.array(box.center))
        size = tuple(s * self.scale for s in box.size)
        return dataclasses.replace(box, center=tuple(c), size=size, yaw=self.apply_yaw(box.yaw))

    def apply_pose(self, pose: Pose) -> Pose:
        t = self.apply_xyz(pose.translation)
        return Pose(t[0], t[1], t[2], self.apply_yaw(pose.yaw))


def draw_augmentation(rng: np.random.Generator, rotation=(-math.pi / 4, math.pi / 4),
                      scale=(0.95, 1.05), flip_prob: float = 0.5) -> Augmentation:
    return Augmentation(bool(rng.random() < flip_prob), float(rng.uniform(*rotation)), float(rng.uniform(*scale)))


def augment_scene(scene, aug: Augmentation):
    """Apply one augmentation identically to every agent and every GT box."""
    agents = []
    for pose, pc in scene.agents:
        new_pose = aug.apply_pose(pose)
        world = pose.apply(pc.points[:, :3])
        local = new_pose.inverse().apply(aug.apply_xyz(world))
        pts = pc.points.copy()
        pts[:, :3] = local
        agents.append((new_pose, PointCloud(pts)))
    gt = [aug.apply_box(b) for b in scene.gt]
    return dataclasses.replace(scene, agents=agents, gt=gt)
