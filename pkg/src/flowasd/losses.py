"""Training objectives over per-sample NLLs: plain NLL and two outlier-exposure variants.

Outlier-exposure losses subtract the mean NLL of outliers that pass a gate.
The gate (``NLL < c``, optionally also ``NLL < max target NLL``) is evaluated
on detached values, so non-qualifying outliers receive exactly zero gradient.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CalibrationFailed, ConfigError, EmptyBatchError
from .numerics import Tensor

LOSS_KINDS = ("nll_only", "oe_threshold", "oe_modified")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "nll_only"
    c: float = None
    k: float = 0.5
    nll_normalization: str = None  # None follows the model it is used with

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.c is not None and not math.isfinite(self.c):
            raise ValueError("threshold c must be finite")
        if self.kind == "oe_modified" and not 0.0 < self.k < 1.0:
            raise ValueError(f"k must lie in (0, 1), got {self.k}")

    @property
    def uses_outliers(self):
        return self.kind != "nll_only"

    def to_dict(self):
        return asdict(self)

    def validate(self):
        """Raise :class:`ConfigError` if an outlier-exposure loss has no threshold yet."""
        if self.uses_outliers and self.c is None:
            raise ConfigError(f"loss {self.kind} needs a threshold c (run calibration or set it)")

    def __call__(self, target, outlier=None):
        """Returns ``(loss, n_qualifying)``."""
        self.validate()
        if self.kind == "nll_only" or outlier is None:
            return loss_nll(target), 0
        if self.kind == "oe_threshold":
            return _oe(target, outlier, self.c, 1.0, max_gate=False)
        return _oe(target, outlier, self.c, self.k, max_gate=True)


def _as_nlls(values):
    return values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=np.float64).reshape(-1))


def qualifying(outlier_nlls, c, target_max=None):
    """Boolean gate over detached outlier NLLs."""
    values = outlier_nlls.data if isinstance(outlier_nlls, Tensor) else np.asarray(outlier_nlls, dtype=np.float64)
    gate = values < c
    if target_max is not None:
        gate &= values < target_max
    return gate


def loss_nll(target):
    target = _as_nlls(target)
    if target.size == 0:
        raise EmptyBatchError("target batch is empty")
    return target.mean()


def _oe(target, outlier, c, k, max_gate):
    target, outlier = _as_nlls(target), _as_nlls(outlier)
    base = loss_nll(target)
    if outlier.size == 0:
        return base, 0
    target_max = float(target.data.max()) if max_gate else None
    idx = np.flatnonzero(qualifying(outlier, c, target_max))
    if idx.size == 0:
        return base, 0
    # index rather than multiply by the gate, so an infinite non-qualifying NLL cannot leak in as inf * 0
    return base - outlier[idx].mean() * k, int(idx.size)


def loss_oe_threshold(target, outlier, c):
    """mean(target) - mean(outliers with NLL < c)."""
    return _oe(target, outlier, c, 1.0, max_gate=False)[0]


def loss_oe_modified(target, outlier, c, k=0.5, max_gate=True):
    """mean(target) - k * mean(outliers with NLL < c and NLL < max(target)).

    ``max_gate=False`` drops the second condition; only then is ``k = 1`` accepted,
    which reduces this loss to :func:`loss_oe_threshold`.
    """
    if not (0.0 < k < 1.0 or (k == 1.0 and not max_gate)):
        raise ValueError(f"k must lie in (0, 1), got {k}")
    return _oe(target, outlier, c, k, max_gate)[0]


@dataclass(frozen=True)
class Calibration:
    c: float
    batch_means: tuple
    epochs: int


def calibrate(pooled_windows, cfg, out_dir=None):
    """Warm up a fresh model on pooled machine-type data with the plain NLL.

    ``cfg`` is a :class:`~flowasd.training.TrainConfig`; its loss is ignored and
    ``cfg.warmup_epochs`` epochs are run. c is the sample-weighted mean training
    NLL of the final epoch, which lies between its smallest and largest batch mean.
    With ``out_dir`` the warmup checkpoint and manifest are kept there.
    """
    from .errors import NonFiniteActivation, NonFiniteGradient
    from .training import train, warmup_config

    if len(pooled_windows) == 0:
        raise CalibrationFailed("no pooled training data")
    run_cfg = warmup_config(cfg)
    try:
        result = train(pooled_windows, None, run_cfg, out_dir, raise_on_failure=True)
    except (NonFiniteActivation, NonFiniteGradient) as exc:
        raise CalibrationFailed(f"warmup diverged: {exc}") from exc
    means = result.manifest.final_batch_means
    c = result.manifest.epochs[-1].target_nll
    if not math.isfinite(c):
        raise CalibrationFailed("warmup produced a non-finite NLL")
    return Calibration(c, tuple(means), run_cfg.epochs)


def calibrate_c(pooled_windows, cfg):
    return calibrate(pooled_windows, cfg).c
