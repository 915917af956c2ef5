"""Model, training and evaluation configuration, JSON round-trippable."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources

from ..attention import WindowConfig
from ..detection import AnchorConfig, LossWeights
from ..errors import DomainError
from ..evaluation import EvalConfig
from ..fusion import BASELINE_MODES, GroupConfig, PathwayConfig
from ..geometry import BevGrid


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _known(cls, d: dict) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise DomainError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return dict(d)


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v


@dataclass(frozen=True)
class ModelConfig:
    grid: BevGrid = field(default_factory=lambda: BevGrid((-25.6, 25.6), (-6.4, 6.4), 0.4, (-0.5, 3.5)))
    max_points: int = 32
    max_pillars_train: int = 64000
    max_pillars_test: int = 70000
    pfn_dim: int = 64
    widths: tuple[int, ...] = (64, 128, 256)
    strides: tuple[int, ...] = (2, 2, 2)
    stage_depth: int = 2
    window: WindowConfig = field(default_factory=WindowConfig)
    groups: GroupConfig = field(default_factory=GroupConfig)
    aspp_dim: int = 64
    aspp_rates: tuple[int, ...] = (1, 3, 6, 12)
    se_reduction: int = 16
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    m1: bool = True
    m2: bool = True
    m3: bool = True
    fusion: str = "max"
    max_agents: int = 4
    score_threshold: float = 0.1
    nms_threshold: float = 0.15
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))
        object.__setattr__(self, "aspp_rates", tuple(int(v) for v in self.aspp_rates))
        if len(self.widths) != len(self.strides) or not self.widths:
            raise DomainError("backbone widths and strides need equal nonzero length")
        if min(self.widths) < 1 or min(self.strides) < 1 or self.pfn_dim < 1 or self.stage_depth < 0:
            raise DomainError("backbone extents must be positive")
        if self.fusion not in BASELINE_MODES:
            raise DomainError(f"fusion must be one of {BASELINE_MODES}, got {self.fusion!r}")
        if not 1 <= self.max_agents <= 4:
            raise DomainError("max_agents must lie in [1, 4]")
        if self.dim % self.se_reduction:
            raise DomainError(f"SE reduction {self.se_reduction} must divide D={self.dim}")
        if self.max_points < 1 or self.max_pillars_train < 1 or self.max_pillars_test < 1:
            raise DomainError("pillar limits must be positive")
        if not 0 <= self.score_threshold <= 1 or not 0 <= self.nms_threshold <= 1:
            raise DomainError("score and NMS thresholds must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def head_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        h, w = self.grid.H, self.grid.W
        for s in self.strides:
            h, w = -(-h // s), -(-w // s)
        return self.dim, h, w

    def loss_weights(self) -> LossWeights:
        if self.m3:
            return self.loss
        lw = self.loss
        return LossWeights.uniform(lambdas=lw.lambdas, alpha=lw.alpha, gamma=lw.gamma, sigma=lw.sigma)

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = _known(cls, d)
        if "grid" in d and isinstance(d["grid"], dict):
            d["grid"] = BevGrid(**{k: _tuples(v) for k, v in d["grid"].items()})
        if "window" in d and isinstance(d["window"], dict):
            d["window"] = WindowConfig(**d["window"])
        if "groups" in d and isinstance(d["groups"], dict):
            g = d["groups"]
            d["groups"] = GroupConfig(groups=g.get("groups", GroupConfig().groups),
                                      pathways={k: PathwayConfig(**v) if isinstance(v, dict) else v
                                                for k, v in g.get("pathways", GroupConfig().pathways).items()})
        if "anchors" in d and isinstance(d["anchors"], dict):
            d["anchors"] = AnchorConfig(**d["anchors"])
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossWeights(**d["loss"])
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr: float = 1e-3
    weight_decay: float = 1e-4
    eps: float = 1e-10
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 2
    milestones: tuple[int, ...] = (10, 50)
    gamma: float = 0.1
    augment: bool = True
    flip_prob: float = 0.5
    rotation: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    scale: tuple[float, float] = (0.95, 1.05)
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "rotation", tuple(float(b) for b in self.rotation))
        object.__setattr__(self, "scale", tuple(float(b) for b in self.scale))
        if self.lr <= 0 or self.weight_decay < 0 or self.eps <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise DomainError("learning rate, epsilon and batch size must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])) or any(m < 0 for m in self.milestones):
            raise DomainError("milestones must be nonnegative and strictly increasing")
        if not 0 < self.gamma <= 1:
            raise DomainError("decay factor must lie in (0, 1]")
        if self.precision not in ("float32", "float64"):
            raise DomainError("precision must be float32 or float64")

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**_known(cls, d))


def eval_config_from_dict(d: dict) -> EvalConfig:
    return EvalConfig(**{k: _tuples(v) for k, v in _known(EvalConfig, d).items()})


def load_config(path=None) -> tuple[ModelConfig, TrainConfig, EvalConfig]:
    """Read a ``{"model": ..., "train": ..., "eval": ...}`` file (all sections optional).

    With no path the packaged defaults are used.
    """
    if path is None:
        text = resources.files("coopdet").joinpath("data/default_config.json").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    doc = json.loads(text)
    unknown = set(doc) - {"model", "train", "eval", "scene"}
    if unknown:
        raise DomainError(f"unknown config sections {sorted(unknown)}")
    return (ModelConfig.from_dict(doc.get("model", {})), TrainConfig.from_dict(doc.get("train", {})),
            eval_config_from_dict(doc.get("eval", {})))


def packaged_config(name: str) -> dict:
    return json.loads(resources.files("coopdet").joinpath(f"data/{name}.json").read_text())
