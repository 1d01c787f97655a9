"""``NFAD`` checkpoints: metadata record plus named parameter, buffer and optimizer arrays."""
from dataclasses import dataclass, field

import numpy as np

from ..container import read_container, write_container
from ..errors import CheckpointVersionError
from ..numerics import OptimizerState
from .model import build_model, config_from_dict, config_to_dict

MAGIC = b"NFAD"
VERSION = 1


@dataclass
class Checkpoint:
    model: object
    optimizer: OptimizerState = None
    epoch: int = 0
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt, dtype="float64"):
    """Write ``ckpt``. float64 keeps resumed training bit-exact; float32 halves the size."""
    model = ckpt.model
    meta = dict(ckpt.metadata)
    meta["model_config"] = config_to_dict(model.config)
    meta["nll_normalization"] = model.nll_normalization
    meta["epoch"] = int(ckpt.epoch)
    std = model.standardizer
    if std is not None:
        meta["standardization"] = {"mean": std.mean.tolist(), "std": std.std.tolist()}
    arrays = {f"model/{k}": v for k, v in model.state_arrays().items()}
    opt = ckpt.optimizer
    if opt is not None:
        meta["optimizer"] = {
            "kind": opt.kind, "learning_rate": opt.learning_rate, "beta1": opt.beta1,
            "beta2": opt.beta2, "epsilon": opt.epsilon, "step_count": opt.step_count,
        }
        names = list(model.named_parameters())
        for name, m, v in zip(names, opt.first_moment, opt.second_moment):
            arrays[f"opt_m/{name}"] = m
            arrays[f"opt_v/{name}"] = v
    write_container(path, MAGIC, VERSION, meta, arrays, dtype=dtype)


def load_checkpoint(path):
    meta, arrays = read_container(path, MAGIC, VERSION, error=CheckpointVersionError)
    model = build_model(config_from_dict(meta["model_config"]))
    model.load_state({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    if "standardization" in meta:
        model.standardizer.set(meta["standardization"]["mean"], meta["standardization"]["std"])
    optimizer = None
    if "optimizer" in meta:
        names = list(model.named_parameters())
        optimizer = OptimizerState(**meta["optimizer"])
        if f"opt_m/{names[0]}" in arrays:
            optimizer.first_moment = [arrays[f"opt_m/{n}"] for n in names]
            optimizer.second_moment = [arrays[f"opt_v/{n}"] for n in names]
    meta = {k: v for k, v in meta.items() if k not in ("model_config", "standardization", "optimizer")}
    return Checkpoint(model, optimizer, int(meta.get("epoch", 0)), meta)
