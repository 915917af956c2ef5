"""A micro model and scene small enough for end-to-end finite differences."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..attention import WindowConfig
from ..detection import AnchorConfig
from ..fusion import GroupConfig, PathwayConfig
from ..geometry import BevGrid, Box3D, PointCloud, Pose
from ..gradcheck import GradReport, grad_check
from ..nn import make_rng
from ..simulator import Scene
from .config import ModelConfig
from .model import build_model, prepare_scene
from .train import batch_loss


def micro_config(**overrides) -> ModelConfig:
    """8x8 BEV, D=16, two agents, two yaw anchors per class, no downsampling."""
    cfg = ModelConfig(
        grid=BevGrid((-1.6, 1.6), (-1.6, 1.6), 0.4, (-0.5, 3.5)),
        max_points=8, max_pillars_train=64, max_pillars_test=64,
        pfn_dim=8, widths=(8, 16, 16), strides=(1, 1, 1), stage_depth=0,
        window=WindowConfig(sizes=(2, 4), heads=(2, 2), head_dims=(4, 4)),
        groups=GroupConfig(pathways={"small": PathwayConfig(2, 4, 1), "large": PathwayConfig(2, 4, 2)}),
        aspp_dim=4, aspp_rates=(1, 2), se_reduction=4,
        anchors=AnchorConfig(yaws=(0.0, np.pi / 2)),
        max_agents=2,
    )
    return cfg.replace(**overrides) if overrides else cfg


def micro_scene(seed: int = 0) -> Scene:
    """Two agents with dense random returns over the micro grid and two objects."""
    rng = make_rng(seed, 7)
    agents = []
    for pose in (Pose(0.0, 0.0, 0.0, 0.0), Pose(0.5, -0.3, 0.0, 0.2)):
        xy = rng.uniform(-1.5, 1.5, size=(120, 2))
        pts = np.column_stack([xy, rng.uniform(0.0, 2.0, 120), rng.uniform(0.0, 1.0, 120)])
        inv = pose.inverse()
        pts[:, :3] = inv.apply(pts[:, :3])
        agents.append((pose, PointCloud(pts)))
    gt = [Box3D((-0.6, 0.6, 0.85), (0.6, 0.6, 1.7), 0.3, "pedestrian"),
          Box3D((0.4, -0.2, 0.8), (4.0, 2.0, 1.6), 1.4, "car")]
    return Scene(seed, 0, agents, gt)


def end_to_end_gradcheck(seed: int = 0, max_entries: int = 3, **overrides) -> GradReport:
    """Finite-difference check of the total loss against every parameter group."""
    cfg = micro_config(seed=seed, **overrides)
    with T.precision(np.float64):
        model = build_model(cfg)
        inputs = [prepare_scene(micro_scene(seed), cfg, train=True)]
        return grad_check(lambda: batch_loss(model, inputs).total, model.parameters(),
                          max_entries=max_entries, rng=make_rng(seed, 8))
