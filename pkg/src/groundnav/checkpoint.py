"""Versioned checkpoint container: named arrays plus the model config.

Model arrays live under ``model/<submodule>.<param>`` with the submodule
prefixes ``encoder. msqp. lm. ctp. decoder. align.``; optimizer moments under
``opt/<param>/<slot>``; step counters and the config JSON under ``meta/``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    model_arrays: dict[str, np.ndarray]
    opt_arrays: dict[str, dict[str, np.ndarray]]
    step: int
    epoch: int


def save_checkpoint(
    path: str | Path,
    model,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    epoch: int = 0,
) -> Path:
    arrays: dict[str, np.ndarray] = {
        "meta/version": np.array(FORMAT_VERSION, dtype=np.int64),
        "meta/step": np.array(step, dtype=np.int64),
        "meta/epoch": np.array(epoch, dtype=np.int64),
        "meta/config": np.frombuffer(model.config.to_json().encode("utf-8"), dtype=np.uint8),
    }
    for name, tensor in model.state_dict().items():
        arrays[f"model/{name}"] = tensor.detach().cpu().numpy()
    if optimizer is not None:
        trainable = [n for n, p in model.named_parameters() if p.requires_grad]
        state = optimizer.state_dict()["state"]
        for idx, name in enumerate(trainable):
            for slot, value in state.get(idx, {}).items():
                if isinstance(value, torch.Tensor):
                    arrays[f"opt/{name}/{slot}"] = value.detach().cpu().numpy()
                else:
                    arrays[f"opt/{name}/{slot}"] = np.array(value)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path) as data:
        version = int(data["meta/version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_json(bytes(data["meta/config"]).decode("utf-8"))
        model_arrays = {}
        opt_arrays: dict[str, dict[str, np.ndarray]] = {}
        for key in data.files:
            if key.startswith("model/"):
                model_arrays[key[len("model/"):]] = data[key]
            elif key.startswith("opt/"):
                name, slot = key[len("opt/"):].rsplit("/", 1)
                opt_arrays.setdefault(name, {})[slot] = data[key]
        return Checkpoint(
            config=config,
            model_arrays=model_arrays,
            opt_arrays=opt_arrays,
            step=int(data["meta/step"]),
            epoch=int(data["meta/epoch"]),
        )


def restore_model_state(model, checkpoint: Checkpoint) -> None:
    state = {name: torch.from_numpy(arr.copy()) for name, arr in checkpoint.model_arrays.items()}
    model.load_state_dict(state)


def restore_optimizer_state(model, optimizer: torch.optim.Optimizer, checkpoint: Checkpoint) -> None:
    trainable = [n for n, p in model.named_parameters() if p.requires_grad]
    state = {}
    for idx, name in enumerate(trainable):
        slots = checkpoint.opt_arrays.get(name)
        if slots is None:
            continue
        state[idx] = {k: torch.from_numpy(v.copy()) for k, v in slots.items()}
    loaded = optimizer.state_dict()
    loaded["state"] = state
    optimizer.load_state_dict(loaded)
