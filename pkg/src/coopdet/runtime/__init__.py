"""Model assembly, optimization, training, checkpoints and benchmarks."""

from .bench import bench_attention, global_macs, rows_to_csv, windowed_macs
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig, load_config, packaged_config
from .model import (
    CoopDetModel,
    build_and_forward,
    build_model,
    detect_scenes,
    forward_batch,
    param_count,
    prepare_scene,
)
from .optim import AdamState, adam_step, multistep_lr
from .train import TrainResult, overfit_losses, train_step, train_toy

__all__ = [
    "AdamState", "Checkpoint", "CoopDetModel", "ModelConfig", "TrainConfig", "TrainResult",
    "adam_step", "bench_attention", "build_and_forward", "build_model", "detect_scenes",
    "forward_batch", "global_macs", "load_checkpoint", "load_config", "multistep_lr",
    "overfit_losses", "packaged_config", "param_count", "prepare_scene", "rows_to_csv",
    "save_checkpoint", "train_step", "train_toy", "windowed_macs",
]
