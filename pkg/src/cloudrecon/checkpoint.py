"""Checkpoint archives.

A checkpoint is a zip archive with

``header.txt``
    ``[checkpoint]`` section (``format_version``, ``epoch``,
    ``best_val_loss``, ``best_epoch``) followed by the full ``[model]`` and
    ``[train]`` configs in the key = value format of :mod:`cloudrecon.config`.
``weights/<name>.npy``
    one array per state-dict entry; floating tensors are stored as
    little-endian float32 (``<f4``), integer buffers as ``<i8``.
``optim/<param index>/<key>.npy`` and ``optim/meta.json``
    optimizer state tensors and the JSON-serialisable remainder of the
    optimizer and learning-rate scheduler state.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as cfgio
from .config import ModelConfig, TrainConfig
from .errors import LoadError
from .model import CloudRemovalNet

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    weights: dict[str, torch.Tensor]
    epoch: int = 0
    best_val_loss: float = float("inf")
    best_epoch: int = -1
    optimizer: dict | None = None
    scheduler: dict | None = field(default=None)

    def build_model(self) -> CloudRemovalNet:
        model = CloudRemovalNet(self.model_cfg)
        expected = model.state_dict()
        missing = sorted(set(expected) - set(self.weights))
        unexpected = sorted(set(self.weights) - set(expected))
        if missing or unexpected:
            raise LoadError(f"checkpoint weights do not match the config: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, ref in expected.items():
            if tuple(ref.shape) != tuple(self.weights[name].shape):
                raise LoadError(
                    f"weight {name!r} has shape {tuple(self.weights[name].shape)}, config implies {tuple(ref.shape)}"
                )
        model.load_state_dict({k: v.to(expected[k].dtype) for k, v in self.weights.items()})
        return model


def _npy(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _to_array(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    if np.issubdtype(a.dtype, np.floating):
        return a.astype("<f4")
    return a.astype("<i8")


def save(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = cfgio.dumps(
        ckpt.model_cfg,
        ckpt.train_cfg,
        extra={
            "checkpoint": {
                "format_version": FORMAT_VERSION,
                "epoch": ckpt.epoch,
                "best_val_loss": float(ckpt.best_val_loss),
                "best_epoch": ckpt.best_epoch,
            }
        },
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.txt", header)
        for name, t in ckpt.weights.items():
            zf.writestr(f"weights/{name}.npy", _npy(_to_array(t)))
        meta: dict = {"scheduler": ckpt.scheduler, "optimizer": None}
        if ckpt.optimizer is not None:
            meta["optimizer"] = {"param_groups": ckpt.optimizer["param_groups"], "state_keys": {}}
            for idx, state in ckpt.optimizer["state"].items():
                keys = []
                for key, value in state.items():
                    if torch.is_tensor(value):
                        zf.writestr(f"optim/{idx}/{key}.npy", _npy(_to_array(value)))
                        keys.append(key)
                meta["optimizer"]["state_keys"][str(idx)] = keys
        zf.writestr("optim/meta.json", json.dumps(meta, sort_keys=True))
    tmp.replace(path)
    return path


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except FileNotFoundError as exc:
        raise LoadError(f"{path}: checkpoint not found") from exc
    except zipfile.BadZipFile as exc:
        raise LoadError(f"{path}: not a checkpoint archive") from exc
    with zf:
        try:
            header = zf.read("header.txt").decode()
            info = cfgio.load_section(header, "checkpoint")
            if int(info["format_version"]) != FORMAT_VERSION:
                raise LoadError(f"{path}: unsupported checkpoint format version {info['format_version']}")
            model_cfg = cfgio.loads(header, ModelConfig)
            train_cfg = cfgio.loads(header, TrainConfig)
            weights = {}
            for name in zf.namelist():
                if name.startswith("weights/") and name.endswith(".npy"):
                    arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                    weights[name[len("weights/"):-4]] = torch.from_numpy(arr.copy())
            meta = json.loads(zf.read("optim/meta.json"))
            optimizer = None
            if meta.get("optimizer") is not None:
                opt = meta["optimizer"]
                state = {}
                for idx, keys in opt["state_keys"].items():
                    state[int(idx)] = {
                        key: torch.from_numpy(
                            np.lib.format.read_array(io.BytesIO(zf.read(f"optim/{idx}/{key}.npy"))).copy()
                        )
                        for key in keys
                    }
                optimizer = {"state": state, "param_groups": opt["param_groups"]}
        except (KeyError, ValueError) as exc:
            raise LoadError(f"{path}: corrupt checkpoint ({exc})") from exc
    return Checkpoint(
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        weights=weights,
        epoch=int(info["epoch"]),
        best_val_loss=float(info["best_val_loss"]),
        best_epoch=int(info["best_epoch"]),
        optimizer=optimizer,
        scheduler=meta.get("scheduler"),
    )


def load_model(path: str | Path) -> tuple[CloudRemovalNet, Checkpoint]:
    ckpt = load(path)
    model = ckpt.build_model()
    model.eval()
    return model, ckpt
