"""Paired-seed comparison of class-balanced against uniform loss weights."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace

from ..evaluation import EvalConfig, evaluate
from .config import ModelConfig, TrainConfig
from .model import detect_scenes
from .train import train_toy


@dataclass
class PairedStudy:
    label: str
    threshold: float
    seeds: list = field(default_factory=list)
    balanced: list = field(default_factory=list)
    uniform: list = field(default_factory=list)

    @property
    def differences(self) -> list[float]:
        return [b - u for b, u in zip(self.balanced, self.uniform)]

    @property
    def median_balanced(self) -> float:
        return statistics.median(self.balanced)

    @property
    def median_uniform(self) -> float:
        return statistics.median(self.uniform)


def class_weight_study(train, val, model_cfg: ModelConfig, train_cfg: TrainConfig, seeds,
                       label: str = "pedestrian", threshold: float = 0.3,
                       eval_cfg: EvalConfig | None = None) -> PairedStudy:
    """Train with and without class weighting for each seed; record one class's AP.

    Both arms of a pair share the seed, so initialization, shuffling and
    augmentation draws are identical and only the loss weights differ.
    """
    eval_cfg = eval_cfg or EvalConfig()
    gts = [s.gt_in_ego_frame() for s in val]
    study = PairedStudy(label, threshold)
    for seed in seeds:
        study.seeds.append(seed)
        for m3, sink in ((True, study.balanced), (False, study.uniform)):
            result = train_toy(train, model_cfg.replace(m3=m3, seed=seed), replace(train_cfg, seed=seed))
            report = evaluate(detect_scenes(result.checkpoint.model, val), gts, eval_cfg)
            ap = report.ap(label, threshold)
            sink.append(0.0 if ap is None else ap)
    return study
