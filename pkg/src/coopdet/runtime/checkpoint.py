"""Byte-deterministic checkpoints: parameters, optimizer moments, epoch, config."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import ParseError
from .config import ModelConfig, TrainConfig
from .model import CoopDetModel, build_model
from .optim import AdamState

_EPOCH_ZERO = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model: CoopDetModel
    state: AdamState
    epoch: int
    train_config: TrainConfig

    @property
    def fingerprint(self) -> str:
        return self.model.config.fingerprint()


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH_ZERO)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = {
        "epoch": int(ckpt.epoch),
        "step": int(ckpt.state.step),
        "fingerprint": ckpt.fingerprint,
        "model": ckpt.model.config.to_dict(),
        "train": ckpt.train_config.to_dict(),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, sort_keys=True).encode())
        for name, p in ckpt.model.named_parameters():
            _write(zf, f"param/{name}.npy", _npy_bytes(p.data))
            if name in ckpt.state.m:
                _write(zf, f"adam_m/{name}.npy", _npy_bytes(ckpt.state.m[name]))
                _write(zf, f"adam_v/{name}.npy", _npy_bytes(ckpt.state.v[name]))


def _read_npy(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)


def load_checkpoint(path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise ParseError(f"cannot open checkpoint: {exc}") from exc
    with zf:
        meta = json.loads(zf.read("meta.json"))
        cfg = ModelConfig.from_dict(meta["model"])
        if cfg.fingerprint() != meta["fingerprint"]:
            raise ParseError("checkpoint config fingerprint mismatch")
        names = set(zf.namelist())
        first = _read_npy(zf, next(n for n in sorted(names) if n.startswith("param/")))
        with T.precision(first.dtype):
            model = build_model(cfg)
        state = AdamState(step=int(meta["step"]))
        for name, p in model.named_parameters():
            key = f"param/{name}.npy"
            if key not in names:
                raise ParseError(f"checkpoint lacks parameter {name}")
            arr = _read_npy(zf, key)
            if arr.shape != p.data.shape:
                raise ParseError(f"parameter {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype)
            if f"adam_m/{name}.npy" in names:
                state.m[name] = _read_npy(zf, f"adam_m/{name}.npy")
                state.v[name] = _read_npy(zf, f"adam_v/{name}.npy")
    return Checkpoint(model, state, int(meta["epoch"]), TrainConfig.from_dict(meta["train"]))
