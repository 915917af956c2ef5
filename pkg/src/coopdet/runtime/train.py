"""Training loop for the desk-scale model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..detection import CLASSES, TERMS, LossResult, Targets, build_targets, check_finite_terms, total_loss
from ..evaluation import EvalConfig, evaluate
from ..geometry import draw_augmentation
from ..nn import make_rng
from .checkpoint import Checkpoint
from .config import ModelConfig, TrainConfig
from .model import CoopDetModel, SceneInput, build_model, detect_scenes, forward_batch, prepare_scene
from .optim import AdamState, adam_step, multistep_lr

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)


def batch_loss(model: CoopDetModel, inputs: list[SceneInput]) -> LossResult:
    cfg = model.config
    cls, reg, dr = forward_batch(model, inputs)
    b, a = cls.shape
    targets = Targets.concat([build_targets(model.anchors, s.gt, cfg.anchors) for s in inputs])
    return total_loss(T.reshape(cls, (b * a,)), T.reshape(reg, (b * a, 7)), T.reshape(dr, (b * a, 2)),
                      targets, cfg.loss_weights())


def train_step(model: CoopDetModel, inputs: list[SceneInput], state: AdamState, train_cfg: TrainConfig,
               lr: float) -> LossResult:
    params = model.parameters()
    with T.Tape() as tape:
        result = batch_loss(model, inputs)
    check_finite_terms(result)
    grads = tape.gradient(result.total, list(params.values()))
    adam_step(params, dict(zip(params, grads)), state, train_cfg, lr)
    return result


def _epoch_batches(n: int, train_cfg: TrainConfig, epoch: int) -> tuple[list[np.ndarray], np.random.Generator]:
    rng = make_rng(train_cfg.seed, 100, epoch)
    order = rng.permutation(n)
    bs = train_cfg.batch_size
    return [order[k:k + bs] for k in range(0, n, bs)], rng


def train_toy(scenes, model_cfg: ModelConfig, train_cfg: TrainConfig, val_scenes=None,
              eval_cfg: EvalConfig | None = None, model: CoopDetModel | None = None,
              state: AdamState | None = None, start_epoch: int = 0) -> TrainResult:
    """Augment, forward, loss, backward, Adam step; one schedule step per epoch.

    Returns the final checkpoint and one history record per epoch with the
    mean loss breakdown and, when ``val_scenes`` is given, a validation report.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    dtype = np.float32 if train_cfg.precision == "float32" else np.float64
    with T.precision(dtype):
        model = model if model is not None else build_model(model_cfg)
        state = state if state is not None else AdamState()
        history = []
        for epoch in range(start_epoch, train_cfg.epochs):
            lr = multistep_lr(epoch, train_cfg)
            batches, rng = _epoch_batches(len(scenes), train_cfg, epoch)
            sums = {c: dict.fromkeys(TERMS, 0.0) for c in CLASSES}
            total = 0.0
            for idx in batches:
                inputs = []
                for i in idx:
                    aug = draw_augmentation(rng, train_cfg.rotation, train_cfg.scale, train_cfg.flip_prob) \
                        if train_cfg.augment else None
                    inputs.append(prepare_scene(scenes[i], model.config, aug, train=True))
                res = train_step(model, inputs, state, train_cfg, lr)
                total += res.total.item()
                for c in CLASSES:
                    for t in TERMS:
                        sums[c][t] += res.weighted[c][t]
            n = len(batches)
            record = {"epoch": epoch, "lr": lr, "loss": total / n,
                      "terms": {c: {t: v / n for t, v in per.items()} for c, per in sums.items()}}
            if val_scenes:
                dets = detect_scenes(model, val_scenes)
                record["val"] = evaluate(dets, [s.gt_in_ego_frame() for s in val_scenes],
                                         eval_cfg or EvalConfig()).to_dict()
            log.info("epoch %d lr %.2e loss %.4f", epoch, lr, record["loss"])
            history.append(record)
    return TrainResult(Checkpoint(model, state, train_cfg.epochs, train_cfg), history)


def overfit_losses(scene, model_cfg: ModelConfig, train_cfg: TrainConfig, steps: int = 10) -> list[float]:
    """Losses of repeated steps on one fixed, unaugmented scene."""
    dtype = np.float32 if train_cfg.precision == "float32" else np.float64
    with T.precision(dtype):
        model = build_model(model_cfg)
        state = AdamState()
        inputs = [prepare_scene(scene, model_cfg, None, train=True)]
        return [train_step(model, inputs, state, train_cfg, train_cfg.lr).total.item() for _ in range(steps)]
