"""Model assembly and the batched forward pass.

A batch is a list of scenes. Every agent's points are moved into the ego
frame, pillarized on the shared grid and encoded; all agent maps of all
scenes go through the backbone (and, with M1, the windowed attention) as a
single stack, then each scene is fused on its own and the fused maps are
stacked again for enhancement and the head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..attention import MultiScaleAttention, msw_forward
from ..detection import Anchors, decode_predictions, generate_anchors, nms_per_class
from ..enhance import Enhancer, enhance_forward
from ..errors import DomainError
from ..fusion import ClassFusion, CrossAgentParams, PathwayConfig, baseline_fuse, class_fusion
from ..geometry import Augmentation, Box3D, PillarSet, PointCloud, pillarize_and_encode
from ..nn import ChannelNorm, Conv2d, Linear, Module, make_rng
from ..tensor import Tensor
from .config import ModelConfig

PRIOR = 0.01


class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng, stride: int = 1):
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=stride, bias=False)
        self.norm = ChannelNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.stages = []
        c = cfg.pfn_dim
        for width, stride in zip(cfg.widths, cfg.strides):
            blocks = [ConvBlock(c, width, rng, stride)]
            blocks += [ConvBlock(width, width, rng) for _ in range(cfg.stage_depth)]
            self.stages.append(blocks)
            c = width

    def named_parameters(self, prefix: str = ""):
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                yield from block.named_parameters(f"{prefix}stages.{s}.{b}.")

    def __call__(self, x: Tensor) -> Tensor:
        for blocks in self.stages:
            for block in blocks:
                x = block(x)
        return x


class Head(Module):
    def __init__(self, dim: int, per_location: int, rng):
        self.cls = Conv2d(dim, per_location, 1, rng)
        self.cls.weight.data *= 0.1
        self.cls.bias.data[:] = -np.log((1 - PRIOR) / PRIOR)
        self.reg = Conv2d(dim, per_location * 7, 1, rng)
        self.reg.weight.data *= 0.1
        self.dir = Conv2d(dim, per_location * 2, 1, rng)
        self.k = per_location

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Flatten to anchor order: ``(B, A)``, ``(B, A, 7)``, ``(B, A, 2)``."""
        b, _, h, w = x.shape
        k = self.k
        cls = T.reshape(T.transpose(self.cls(x), (0, 2, 3, 1)), (b, h * w * k))
        reg = T.reshape(T.transpose(T.reshape(self.reg(x), (b, k, 7, h, w)), (0, 3, 4, 1, 2)), (b, h * w * k, 7))
        dr = T.reshape(T.transpose(T.reshape(self.dir(x), (b, k, 2, h, w)), (0, 3, 4, 1, 2)), (b, h * w * k, 2))
        return cls, reg, dr


class CoopDetModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        d = cfg.dim
        # one stream per component keeps shared parts identical across ablations
        self.pfn = Linear(9, cfg.pfn_dim, make_rng(cfg.seed, 1))
        self.backbone = Backbone(cfg, make_rng(cfg.seed, 2))
        self.msa = MultiScaleAttention(d, cfg.window, make_rng(cfg.seed, 3)) if cfg.m1 else None
        self.fusion = ClassFusion(d, cfg.groups, make_rng(cfg.seed, 4)) if cfg.m1 else None
        self.single = None
        if not cfg.m1 and cfg.fusion == "single":
            path = cfg.groups.pathways.get("large", PathwayConfig(4, 64, 1))
            self.single = CrossAgentParams(d, dataclasses.replace(path, downsample=1), make_rng(cfg.seed, 5))
        self.enhancer = Enhancer(d, make_rng(cfg.seed, 6), cfg.aspp_dim, cfg.se_reduction, cfg.aspp_rates) \
            if cfg.m2 else None
        self.head = Head(d, cfg.anchors.per_location, make_rng(cfg.seed, 7))
        self.anchors: Anchors = generate_anchors(cfg.grid, cfg.anchors, cfg.head_stride)

    def named_parameters(self, prefix: str = ""):
        for name in ("pfn", "backbone", "msa", "fusion", "single", "enhancer", "head"):
            mod = getattr(self, name)
            if mod is not None:
                yield from mod.named_parameters(f"{prefix}{name}.")


def build_model(cfg: ModelConfig) -> CoopDetModel:
    return CoopDetModel(cfg)


def param_count(model: Module) -> dict:
    """Total scalar parameter count and a per-component breakdown."""
    per = {}
    for name, p in model.named_parameters():
        key = name.split(".", 1)[0]
        per[key] = per.get(key, 0) + int(p.data.size)
    return {"total": sum(per.values()), "modules": per}


# ------------------------------------------------------------------- inputs


@dataclass
class SceneInput:
    pillars: list[PillarSet]      # one per agent, ego agent first
    gt: list[Box3D]               # ego-frame boxes whose centers lie on the grid


def ego_frame_points(scene) -> list[np.ndarray]:
    """Every agent's cloud in the ego frame, ego agent first."""
    inv = scene.ego_pose.inverse()
    order = [scene.ego] + [k for k in range(len(scene.agents)) if k != scene.ego]
    out = []
    for k in order:
        pose, pc = scene.agents[k]
        rel = inv.compose(pose)
        pts = pc.points.copy()
        pts[:, :3] = rel.apply(pc.points[:, :3])
        out.append(pts)
    return out


def prepare_scene(scene, cfg: ModelConfig, aug: Augmentation | None = None, train: bool = False) -> SceneInput:
    if len(scene.agents) > cfg.max_agents:
        raise DomainError(f"scene has {len(scene.agents)} agents, model supports {cfg.max_agents}")
    clouds = ego_frame_points(scene)
    gt = scene.gt_in_ego_frame()
    if aug is not None:
        for pts in clouds:
            pts[:, :3] = aug.apply_xyz(pts[:, :3])
        gt = [aug.apply_box(b) for b in gt]
    limit = cfg.max_pillars_train if train else cfg.max_pillars_test
    pillars = [pillarize_and_encode(PointCloud(p), cfg.grid, cfg.max_points, limit) for p in clouds]
    g = cfg.grid
    gt = [b for b in gt if g.x_range[0] <= b.center[0] < g.x_range[1] and g.y_range[0] <= b.center[1] < g.y_range[1]]
    return SceneInput(pillars, gt)


# ------------------------------------------------------------------ forward


def encode_pillars(model: CoopDetModel, inputs: list[SceneInput]) -> Tensor:
    """Pillar feature net plus scatter: ``(total_agents, C, H, W)``."""
    cfg = model.config
    sets = [p for s in inputs for p in s.pillars]
    feats = np.concatenate([p.features for p in sets]) if sets else np.zeros((0, cfg.max_points, 9))
    mask = np.concatenate([p.mask for p in sets]) if sets else np.zeros((0, cfg.max_points), bool)
    map_id = np.concatenate([np.full(len(p), k) for k, p in enumerate(sets)]).astype(np.int64) \
        if sets else np.zeros(0, np.int64)
    coords = np.concatenate([p.coords for p in sets]) if sets else np.zeros((0, 2), np.int64)
    dtype = T.default_dtype()
    n_p, m, _ = feats.shape
    c = cfg.pfn_dim
    x = Tensor(feats.reshape(n_p * m, 9).astype(dtype))
    h = T.relu(model.pfn(x))
    h = T.reshape(h, (n_p, m, c)) * mask[:, :, None].astype(dtype)
    pooled = T.max_(h, axis=1) if n_p else T.reshape(h, (0, c))
    shape = (len(sets), c, cfg.grid.H, cfg.grid.W)
    index = (map_id, slice(None), coords[:, 0], coords[:, 1])
    return T.scatter(pooled, index, shape)


def fuse_scenes(model: CoopDetModel, maps: Tensor, counts: list[int]) -> Tensor:
    """Per-scene fusion of the ego-first agent stacks into ``(B, D, h, w)``."""
    cfg = model.config
    if cfg.m1:
        maps = msw_forward(maps, model.msa)
    fused, start = [], 0
    for n in counts:
        agents = T.getitem(maps, slice(start, start + n))
        start += n
        if cfg.m1:
            fused.append(class_fusion(agents, 0, model.fusion))
        else:
            fused.append(baseline_fuse(agents, cfg.fusion, 0, model.single))
    return T.stack(fused, axis=0)


def forward_batch(model: CoopDetModel, inputs: list[SceneInput]) -> tuple[Tensor, Tensor, Tensor]:
    bev = encode_pillars(model, inputs)
    feats = model.backbone(bev)
    fused = fuse_scenes(model, feats, [len(s.pillars) for s in inputs])
    if model.config.m2:
        fused = enhance_forward(fused, model.enhancer)
    return model.head(fused)


def detect(model: CoopDetModel, outputs, index: int) -> list[Box3D]:
    cls, reg, dr = (o.numpy()[index] for o in outputs)
    cfg = model.config
    dets = decode_predictions(cls, reg, dr, model.anchors, cfg.score_threshold)
    return nms_per_class(dets, cfg.nms_threshold)


def build_and_forward(scene, model: CoopDetModel) -> list[Box3D]:
    """Ego-frame detections for one scene."""
    return detect_scenes(model, [scene])[0]


def detect_scenes(model: CoopDetModel, scenes, batch_size: int = 4) -> list[list[Box3D]]:
    """Batched inference at the precision the parameters are stored in."""
    dtype = next(p for _, p in model.named_parameters()).dtype
    out = []
    with T.precision(dtype):
        for k in range(0, len(scenes), batch_size):
            chunk = scenes[k:k + batch_size]
            outputs = forward_batch(model, [prepare_scene(s, model.config) for s in chunk])
            out.extend(detect(model, outputs, i) for i in range(len(chunk)))
    return out
