"""Per-machine-ID training loop with outlier exposure, checkpointing and deterministic seeding.

Every random draw comes from ``numpy.random.default_rng([seed, stream, epoch])``
(PCG64 seeded through SeedSequence), with separate streams for initialization,
target shuffling and outlier shuffling. Epoch ``e`` therefore draws the same
numbers whether it runs in one go or after a resume, and the target batches do
not depend on whether outliers are used at all.
"""
import copy
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyBatchError, NonFiniteActivation, NonFiniteGradient, ShapeError
from .features import FeatureWindows
from .flows import Checkpoint, GlowConfig, MafConfig, build_model, load_checkpoint, save_checkpoint
from .losses import LossSpec
from .numerics import Optimizer, OptimizerState, clip_grad_norm

INIT_STREAM, TARGET_STREAM, OUTLIER_STREAM = 0, 1, 2
GLOW_WINDOW_FRAMES = 32
CHECKPOINT_NAME = "checkpoint.nfad"
MANIFEST_NAME = "manifest.txt"

PRESETS = {
    "maf_additive": {"kind": "maf", "mode": "additive", "optimizer": "adam", "learning_rate": 1e-4},
    "maf_affine": {"kind": "maf", "mode": "affine", "optimizer": "adam", "learning_rate": 1e-4},
    "glow_additive": {"kind": "glow", "mode": "additive", "optimizer": "adamax", "learning_rate": 5e-4},
    "glow_affine": {"kind": "glow", "mode": "affine", "optimizer": "adamax", "learning_rate": 5e-4},
}


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. ``optimizer`` and ``learning_rate`` of None take the preset's value.

    ``model_overrides`` replaces fields of the preset's model config, e.g.
    ``{"hidden_units": 64}`` or ``{"input_shape": (1, 16, 32)}``.
    """

    model_preset: str = "maf_additive"
    epochs: int = 100
    batch_size: int = 64
    optimizer: str = None
    learning_rate: float = None
    loss: LossSpec = LossSpec()
    seed: int = 0
    outlier_fraction: float = 0.5
    warmup_epochs: int = 5
    clip_norm: float = 100.0
    checkpoint_every: int = 10
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model_preset not in PRESETS:
            raise ConfigError(f"unknown model preset {self.model_preset!r}; choose from {sorted(PRESETS)}")
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 1:
            raise ConfigError("epochs must be >= 0, batch_size and warmup_epochs >= 1")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ConfigError(f"outlier_fraction must lie in [0, 1), got {self.outlier_fraction}")
        if self.optimizer not in (None, "adam", "adamax"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_norm <= 0 or self.checkpoint_every < 1:
            raise ConfigError("clip_norm must be > 0 and checkpoint_every >= 1")

    @property
    def preset(self):
        return PRESETS[self.model_preset]

    @property
    def optimizer_kind(self):
        return self.optimizer or self.preset["optimizer"]

    @property
    def lr(self):
        return self.learning_rate if self.learning_rate is not None else self.preset["learning_rate"]

    @property
    def outlier_batch_size(self):
        """Outlier samples per step, chosen so they make up ``outlier_fraction`` of the step."""
        f = self.outlier_fraction
        return int(math.floor(self.batch_size * f / (1.0 - f) + 0.5))

    def to_dict(self):
        d = asdict(self)
        d["model_overrides"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.model_overrides.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss"] = LossSpec(**d["loss"])
        return cls(**d)


def model_config(cfg, input_dim):
    """Preset model config for flat inputs of length ``input_dim``, with overrides applied."""
    preset = cfg.preset
    overrides = dict(cfg.model_overrides)
    if preset["kind"] == "maf":
        model_cfg = MafConfig(input_dim=input_dim, mode=preset["mode"])
    else:
        if "input_shape" not in overrides:
            if input_dim % GLOW_WINDOW_FRAMES:
                raise ShapeError(f"input dim {input_dim} is not {GLOW_WINDOW_FRAMES} frames of mel bins")
            overrides["input_shape"] = (1, GLOW_WINDOW_FRAMES, input_dim // GLOW_WINDOW_FRAMES)
        model_cfg = GlowConfig(mode=preset["mode"])
    for key in ("input_shape", "kernel_sizes"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    unknown = set(overrides) - set(asdict(model_cfg))
    if unknown:
        raise ConfigError(f"unknown model override(s) {sorted(unknown)}")
    model_cfg = replace(model_cfg, **overrides)
    if model_cfg.input_dim != input_dim:
        raise ShapeError(f"model expects inputs of length {model_cfg.input_dim}, data has {input_dim}")
    return model_cfg


def warmup_config(cfg):
    return replace(cfg, epochs=cfg.warmup_epochs, loss=LossSpec("nll_only"))


# -- manifest --------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    target_nll: float
    outlier_nll: float = None
    qualifying_fraction: float = None


def _fmt(value):
    return "" if value is None else repr(float(value))


def _parse(text):
    return None if text == "" else float(text)


@dataclass
class RunManifest:
    """Plain-text run record: ``key=value`` lines, then one CSV row per completed epoch."""

    config: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)
    status: str = "running"
    failed_layer: str = ""
    failure: str = ""
    clipped_steps: int = 0
    wall_time: float = 0.0
    checkpoint_path: str = ""
    final_batch_means: list = field(default_factory=list)

    CSV_HEADER = "epoch,target_nll,outlier_nll,qualifying_fraction"

    def to_text(self, include_wall_time=True):
        lines = [
            f"status={self.status}",
            f"failed_layer={self.failed_layer}",
            f"failure={self.failure}",
            f"epochs_completed={len(self.epochs)}",
            f"clipped_steps={self.clipped_steps}",
            f"checkpoint={self.checkpoint_path}",
            "final_batch_nll=" + ",".join(_fmt(v) for v in self.final_batch_means),
        ]
        if include_wall_time:
            lines.append(f"wall_time={self.wall_time:.3f}")
        lines += [f"config.{k}={v}" for k, v in sorted(_flatten(self.config).items())]
        lines.append(self.CSV_HEADER)
        for e in self.epochs:
            lines.append(f"{e.epoch},{_fmt(e.target_nll)},{_fmt(e.outlier_nll)},{_fmt(e.qualifying_fraction)}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text):
        manifest, records, config = cls(), {}, {}
        lines = text.splitlines()
        header = lines.index(cls.CSV_HEADER)
        for line in lines[:header]:
            key, _, value = line.partition("=")
            if key.startswith("config."):
                config[key[len("config."):]] = value
            else:
                records[key] = value
        manifest.config = config
        manifest.status = records.get("status", "")
        manifest.failed_layer = records.get("failed_layer", "")
        manifest.failure = records.get("failure", "")
        manifest.clipped_steps = int(records.get("clipped_steps", 0))
        manifest.checkpoint_path = records.get("checkpoint", "")
        manifest.wall_time = float(records.get("wall_time", 0.0))
        batch = records.get("final_batch_nll", "")
        manifest.final_batch_means = [float(v) for v in batch.split(",")] if batch else []
        for row in lines[header + 1:]:
            epoch, t, o, q = row.split(",")
            manifest.epochs.append(EpochStats(int(epoch), _parse(t), _parse(o), _parse(q)))
        return manifest

    @classmethod
    def read(cls, path):
        return cls.from_text(Path(path).read_text())


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


# -- loop --------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    optimizer: OptimizerState
    manifest: RunManifest
    checkpoint: Checkpoint

    @property
    def failed(self):
        return self.manifest.status == "failed"


def _as_matrix(data):
    if data is None:
        return None
    if isinstance(data, FeatureWindows):
        return np.asarray(data.values, dtype=np.float64)
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], FeatureWindows):
        return np.concatenate([np.asarray(w.values, dtype=np.float64) for w in data])
    matrix = np.asarray(data, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError(f"expected windows of shape [N, D], got {matrix.shape}")
    return matrix


def _checkpoint(model, optimizer, epoch, cfg, manifest):
    meta = {
        "train_config": cfg.to_dict(),
        "loss": cfg.loss.to_dict(),
        "seed": cfg.seed,
        "history": [[e.epoch, e.target_nll, e.outlier_nll, e.qualifying_fraction] for e in manifest.epochs],
        "clipped_steps": manifest.clipped_steps,
    }
    return Checkpoint(model, optimizer, epoch, meta)


def _check_parameters(model):
    for i, layer in enumerate(model.layers):
        for p in layer.parameters().values():
            if not np.all(np.isfinite(p.data)):
                raise NonFiniteActivation(i, layer.name, "update")


def train(target, outlier, cfg, out_dir=None, raise_on_failure=False):
    """Train a fresh model on ``target`` windows, using ``outlier`` windows for exposure losses.

    Returns a :class:`TrainResult`. A non-finite activation, gradient or
    parameter marks the run failed and rolls the model back to the end of the
    last completed epoch; with ``raise_on_failure`` the error propagates instead.
    """
    cfg.loss.validate()
    x = _as_matrix(target)
    if x is None or len(x) == 0:
        raise EmptyBatchError("no target windows")
    model = build_model(model_config(cfg, x.shape[1]), np.random.default_rng([cfg.seed, INIT_STREAM]))
    with np.errstate(over="ignore", invalid="ignore"):
        mean, std = x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
        raise NonFiniteActivation(0, "standardize")
    model.standardizer.set(mean, std)
    state = OptimizerState(cfg.optimizer_kind, cfg.lr)
    manifest = RunManifest(config=cfg.to_dict())
    return _run(model, state, x, _as_matrix(outlier), cfg, 0, cfg.epochs, manifest, out_dir, raise_on_failure)


def resume(checkpoint, target, outlier, additional_epochs, out_dir=None, raise_on_failure=False):
    """Continue a run from a checkpoint (object or path) for ``additional_epochs`` more epochs."""
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    cfg = TrainConfig.from_dict(ckpt.metadata["train_config"])
    manifest = RunManifest(config=cfg.to_dict(), clipped_steps=int(ckpt.metadata.get("clipped_steps", 0)))
    manifest.epochs = [EpochStats(int(e), t, o, q) for e, t, o, q in ckpt.metadata.get("history", [])]
    state = ckpt.optimizer or OptimizerState(cfg.optimizer_kind, cfg.lr)
    x = _as_matrix(target)
    if additional_epochs == 0:
        manifest.status = "completed"
        return TrainResult(ckpt.model, state, manifest, ckpt)
    return _run(ckpt.model, state, x, _as_matrix(outlier), cfg, ckpt.epoch, additional_epochs, manifest, out_dir,
                raise_on_failure)


def _run(model, state, x, outliers, cfg, start_epoch, n_epochs, manifest, out_dir, raise_on_failure):
    spec = cfg.loss
    spec.validate()
    if spec.nll_normalization not in (None, model.nll_normalization):
        raise ConfigError(f"c is given as {spec.nll_normalization} NLL but the model reports {model.nll_normalization}")
    n_out = cfg.outlier_batch_size if spec.uses_outliers else 0
    if n_out and (outliers is None or len(outliers) == 0):
        raise ConfigError(f"loss {spec.kind} needs outlier windows")
    if outliers is not None and n_out and outliers.shape[1] != x.shape[1]:
        raise ShapeError("target and outlier windows differ in length")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest.checkpoint_path = str(out_dir / CHECKPOINT_NAME)
    params = model.parameters()
    opt = Optimizer(params, state)
    began = time.perf_counter()
    epoch = start_epoch
    good = (copy.deepcopy(model), copy.deepcopy(state), start_epoch)

    def save(m, s, e):
        ckpt = _checkpoint(m, s, e, cfg, manifest)
        if out_dir is not None:
            save_checkpoint(out_dir / CHECKPOINT_NAME, ckpt)
        return ckpt

    try:
        for epoch in range(start_epoch + 1, start_epoch + n_epochs + 1):
            stats, batch_means = _epoch(model, opt, x, outliers, cfg, spec, n_out, epoch, manifest)
            manifest.epochs.append(stats)
            manifest.final_batch_means = batch_means
            good = (copy.deepcopy(model), copy.deepcopy(state), epoch)
            if epoch % cfg.checkpoint_every == 0 and out_dir is not None:
                save(model, state, epoch)
    except (NonFiniteActivation, NonFiniteGradient) as exc:
        manifest.status = "failed"
        manifest.failure = str(exc)
        manifest.failed_layer = getattr(exc, "layer_name", None) or getattr(exc, "layer", None) or ""
        manifest.wall_time = time.perf_counter() - began
        model, state, last = good
        ckpt = save(model, state, last)
        if out_dir is not None:
            manifest.write(out_dir / MANIFEST_NAME)
        if raise_on_failure:
            raise
        return TrainResult(model, state, manifest, ckpt)
    manifest.status = "completed"
    manifest.wall_time = time.perf_counter() - began
    ckpt = save(model, state, epoch)
    if out_dir is not None:
        manifest.write(out_dir / MANIFEST_NAME)
    return TrainResult(model, state, manifest, ckpt)


def _mean(values):
    """Mean that stays finite for finite values near the float64 limit."""
    return float(np.sum(values / len(values)))


def _epoch(model, opt, x, outliers, cfg, spec, n_out, epoch, manifest):
    order = np.random.default_rng([cfg.seed, TARGET_STREAM, epoch]).permutation(len(x))
    if n_out:
        outlier_order = np.random.default_rng([cfg.seed, OUTLIER_STREAM, epoch]).permutation(len(outliers))
    target_mean = outlier_mean = 0.0
    n_targets = n_outliers = n_qualifying = 0
    batch_means = []
    for b, start in enumerate(range(0, len(x), cfg.batch_size)):
        xb = x[order[start:start + cfg.batch_size]]
        if model.needs_init:
            model.initialize(xb)
        opt.zero_grad()
        nll_t = model.nll(xb)
        nll_o = None
        if n_out:
            pick = np.take(outlier_order, np.arange(b * n_out, (b + 1) * n_out), mode="wrap")
            nll_o = model.nll(outliers[pick])
        with np.errstate(over="ignore", invalid="ignore"):
            loss, q = spec(nll_t, nll_o)
        if not np.isfinite(loss.item()):
            raise NonFiniteActivation(len(model.layers), "loss")
        loss.backward()
        if clip_grad_norm(opt.params, cfg.clip_norm) > cfg.clip_norm:
            manifest.clipped_steps += 1
        opt.step()
        _check_parameters(model)
        batch_means.append(_mean(nll_t.data))
        n_targets += len(nll_t.data)
        target_mean += (batch_means[-1] - target_mean) * len(nll_t.data) / n_targets
        if nll_o is not None:
            n_outliers += len(nll_o.data)
            outlier_mean += (_mean(nll_o.data) - outlier_mean) * len(nll_o.data) / n_outliers
            n_qualifying += q
    stats = EpochStats(
        epoch,
        target_mean,
        outlier_mean if n_outliers else None,
        n_qualifying / n_outliers if n_outliers else None,
    )
    return stats, batch_means
