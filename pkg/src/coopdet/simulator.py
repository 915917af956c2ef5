"""Deterministic synthetic multi-agent LiDAR scenes with known ground truth.

Each scene is a pure function of its seed: all randomness comes from a
Philox generator keyed by that seed, and a dataset derives per-scene seeds
from the base seed by counter splitting.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import CapacityError, DomainError, ParseError
from .geometry import CLASSES, Box3D, PointCloud, Pose
from .nn import make_rng

DEFAULT_SIZES = {
    "pedestrian": (0.6, 0.6, 1.7),
    "car": (4.0, 2.0, 1.6),
    "truck": (9.6, 2.6, 3.5),
}


@dataclass(frozen=True)
class SensorModel:
    base_rate: float = 400.0
    min_range: float = 5.0
    max_range: float = 60.0
    noise_sigma: float = 0.02
    height: float = 1.8

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DomainError("noise sigma must be non-negative")
        if self.base_rate < 0 or self.max_range <= 0 or self.min_range <= 0:
            raise DomainError("sensor rates and ranges must be positive")


@dataclass(frozen=True)
class SceneConfig:
    n_agents: int = 2
    counts: dict = field(default_factory=lambda: {"car": 10, "pedestrian": 6, "truck": 2})
    sizes: dict = field(default_factory=lambda: dict(DEFAULT_SIZES))
    size_jitter: float = 0.1
    x_range: tuple[float, float] = (-24.0, 24.0)
    y_range: tuple[float, float] = (-5.6, 5.6)
    agent_clearance: float = 3.0
    clutter_points: int = 300
    sensor: SensorModel = field(default_factory=SensorModel)
    occlusion: bool = False
    max_retries: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_agents <= 4:
            raise DomainError("n_agents must lie in [1, 4]")
        if any(int(n) < 0 for n in self.counts.values()):
            raise DomainError("object counts must be non-negative")
        unknown = set(self.counts) - set(CLASSES)
        if unknown:
            raise DomainError(f"unknown classes {sorted(unknown)}")
        if isinstance(self.sensor, dict):
            object.__setattr__(self, "sensor", SensorModel(**self.sensor))
        object.__setattr__(self, "x_range", tuple(self.x_range))
        object.__setattr__(self, "y_range", tuple(self.y_range))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Scene:
    seed: int
    ego: int
    agents: list = field(default_factory=list)
    gt: list = field(default_factory=list)

    @property
    def ego_pose(self) -> Pose:
        return self.agents[self.ego][0]

    def gt_in_ego_frame(self) -> list[Box3D]:
        inv = self.ego_pose.inverse()
        out = []
        for b in self.gt:
            c = inv.apply(np.array(b.center))
            out.append(dataclasses.replace(b, center=tuple(c), yaw=b.yaw + inv.yaw))
        return out


# ----------------------------------------------------------------- sampling


def _faces(box: Box3D, sensor_xy: np.ndarray):
    """The sensor-facing side faces and the top, as (origin, u, v, area) in the box frame."""
    l, w, h = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = sensor_xy - np.asarray(box.center[:2])
    lx, ly = c * d[0] + s * d[1], -s * d[0] + c * d[1]
    sx = 1.0 if lx >= 0 else -1.0
    sy = 1.0 if ly >= 0 else -1.0
    return [
        (np.array([sx * l / 2, 0.0, 0.0]), np.array([0.0, w, 0.0]), np.array([0.0, 0.0, h]), w * h),
        (np.array([0.0, sy * w / 2, 0.0]), np.array([l, 0.0, 0.0]), np.array([0.0, 0.0, h]), l * h),
        (np.array([0.0, 0.0, h / 2]), np.array([l, 0.0, 0.0]), np.array([0.0, w, 0.0]), l * w),
    ]


def expected_point_count(box: Box3D, sensor_pose: Pose, model: SensorModel) -> float:
    r = math.hypot(box.center[0] - sensor_pose.x, box.center[1] - sensor_pose.y)
    if r > model.max_range:
        return 0.0
    area = sum(f[3] for f in _faces(box, np.array([sensor_pose.x, sensor_pose.y])))
    return model.base_rate * area / max(r, model.min_range) ** 2


def sample_object_points(box: Box3D, sensor_pose: Pose, model: SensorModel,
                         rng: np.random.Generator) -> np.ndarray:
    """World-frame ``(K, 4)`` returns from the visible surfaces of ``box``.

    The count is Poisson with mean ``base_rate * visible_area / r**2``.
    """
    lam = expected_point_count(box, sensor_pose, model)
    if lam <= 0:
        return np.zeros((0, 4))
    n = int(rng.poisson(lam))
    faces = _faces(box, np.array([sensor_pose.x, sensor_pose.y]))
    areas = np.array([f[3] for f in faces])
    per_face = rng.multinomial(n, areas / areas.sum())
    local = []
    for (origin, u, v, _), k in zip(faces, per_face):
        a = rng.random(k)[:, None] - 0.5
        b = rng.random(k)[:, None] - 0.5
        local.append(origin + a * u + b * v)
    local = np.concatenate(local) if local else np.zeros((0, 3))
    pose = Pose(box.center[0], box.center[1], box.center[2], box.yaw)
    world = pose.apply(local)
    if model.noise_sigma > 0:
        world = world + rng.normal(0.0, model.noise_sigma, local.shape)
    return np.column_stack([world, rng.random(len(world))])


def _occlude(points: np.ndarray, owner: np.ndarray, sensor_xy: np.ndarray) -> np.ndarray:
    # 1-degree azimuth bins; only the nearest object's returns survive in each bin
    d = points[:, :2] - sensor_xy
    rng_ = np.hypot(d[:, 0], d[:, 1])
    bins = np.floor(np.degrees(np.arctan2(d[:, 1], d[:, 0])) + 180.0).astype(np.int64) % 360
    keep = np.ones(len(points), dtype=bool)
    for b in np.unique(bins):
        sel = np.nonzero(bins == b)[0]
        nearest_owner = owner[sel[np.argmin(rng_[sel])]]
        keep[sel] = owner[sel] == nearest_owner
    return keep


def _place_objects(config: SceneConfig, agent_xy: np.ndarray, rng: np.random.Generator) -> list[Box3D]:
    placed: list[Box3D] = []
    rows = np.zeros((0, 5))
    order = sorted(CLASSES, key=lambda c: -np.prod(config.sizes[c][:2]))
    for label in order:
        mean = np.asarray(config.sizes[label], dtype=float)
        for _ in range(int(config.counts.get(label, 0))):
            for _attempt in range(config.max_retries):
                size = mean * rng.uniform(1 - config.size_jitter, 1 + config.size_jitter, 3)
                x = rng.uniform(*config.x_range)
                y = rng.uniform(*config.y_range)
                yaw = rng.uniform(0.0, 2 * math.pi)
                reach = 0.5 * math.hypot(size[0], size[1]) + config.agent_clearance
                if len(agent_xy) and np.min(np.hypot(agent_xy[:, 0] - x, agent_xy[:, 1] - y)) < reach:
                    continue
                row = np.array([[x, y, size[0], size[1], yaw]])
                if len(rows) and _kernels.intersection_matrix(row, rows).max() > 0.0:
                    continue
                placed.append(Box3D((x, y, size[2] / 2), tuple(size), yaw, label))
                rows = np.vstack([rows, row])
                break
            else:
                raise CapacityError(f"could not place a {label} after {config.max_retries} attempts")
    return placed


def gen_scene(config: SceneConfig) -> Scene:
    rng = make_rng(config.seed)
    poses = [Pose()]
    for _ in range(config.n_agents - 1):
        poses.append(Pose(rng.uniform(*config.x_range), rng.uniform(*config.y_range), 0.0,
                          rng.uniform(0, 2 * math.pi)))
    agent_xy = np.array([[p.x, p.y] for p in poses])
    gt = _place_objects(config, agent_xy, rng)

    agents = []
    model = config.sensor
    for pose in poses:
        chunks, owners = [], []
        for k, box in enumerate(gt):
            pts = sample_object_points(box, pose, model, rng)
            chunks.append(pts)
            owners.append(np.full(len(pts), k))
        pts = np.concatenate(chunks) if chunks else np.zeros((0, 4))
        owner = np.concatenate(owners) if owners else np.zeros(0, np.int64)
        if config.occlusion and len(pts):
            keep = _occlude(pts, owner, agent_xy[len(agents)])
            pts = pts[keep]
        n_c = config.clutter_points
        clutter = np.column_stack([
            rng.uniform(config.x_range[0] - 2, config.x_range[1] + 2, n_c),
            rng.uniform(config.y_range[0] - 1, config.y_range[1] + 1, n_c),
            np.abs(rng.normal(0.0, 0.05, n_c)),
            rng.random(n_c) * 0.2,
        ])
        near = np.hypot(clutter[:, 0] - pose.x, clutter[:, 1] - pose.y) <= model.max_range
        world = np.concatenate([pts, clutter[near]])
        local = world.copy()
        local[:, :3] = pose.inverse().apply(world[:, :3])
        agents.append((pose, PointCloud(local)))
    return Scene(seed=int(config.seed), ego=0, agents=agents, gt=gt)


def scene_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n, dtype=np.uint32)]


def gen_dataset(config: SceneConfig, n_scenes: int) -> list[Scene]:
    return [gen_scene(dataclasses.replace(config, seed=s)) for s in scene_seeds(config.seed, n_scenes)]


# ------------------------------------------------------------ serialization


def scene_to_record(scene: Scene) -> dict:
    return {
        "seed": scene.seed,
        "ego": scene.ego,
        "agents": [
            {"pose": {"x": p.x, "y": p.y, "z": p.z, "yaw": p.yaw}, "points": pc.points.tolist()}
            for p, pc in scene.agents
        ],
        "gt": [{"c": list(b.center), "s": list(b.size), "yaw": b.yaw, "class": b.label} for b in scene.gt],
    }


def scene_from_record(rec: dict) -> Scene:
    agents = []
    for a in rec["agents"]:
        p = a["pose"]
        pose = Pose(float(p["x"]), float(p["y"]), float(p["z"]), float(p["yaw"]))
        agents.append((pose, PointCloud(np.asarray(a["points"], dtype=np.float64).reshape(-1, 4))))
    gt = [Box3D(tuple(g["c"]), tuple(g["s"]), float(g["yaw"]), g["class"]) for g in rec["gt"]]
    ego = int(rec["ego"])
    if agents and not 0 <= ego < len(agents):
        raise ValueError(f"ego index {ego} out of range")
    return Scene(seed=int(rec["seed"]), ego=ego, agents=agents, gt=gt)


def write_dataset(scenes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_record(scene), separators=(",", ":")))
            fh.write("\n")


def read_dataset(path) -> list[Scene]:
    scenes = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            scenes.append(scene_from_record(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed scene record ({exc})", line=lineno) from exc
    return scenes
