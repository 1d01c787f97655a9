"""Flow models with a standard-normal base and exact NLL by change of variables."""
import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import NonFiniteActivation, ShapeError
from ..numerics import Tensor, concat, layer_scope, no_grad
from .layers import (
    ActNorm,
    Coupling,
    InvertibleMixing,
    MadeBlock,
    Reshape,
    Split,
    Squeeze,
    Standardize,
)

LOG_2PI = math.log(2.0 * math.pi)
NORMALIZATIONS = ("total", "per_dim")


@dataclass(frozen=True)
class MafConfig:
    input_dim: int = 512
    n_blocks: int = 4
    hidden_units: int = 512
    mode: str = "additive"
    activation: str = "tanh"
    clamp: bool = True
    nll_normalization: str = "total"
    kind: str = "maf"


@dataclass(frozen=True)
class GlowConfig:
    input_shape: tuple = (1, 32, 128)
    n_blocks: int = 3
    n_steps: int = 12
    hidden_channels: int = 128
    mode: str = "additive"
    kernel_sizes: tuple = (3, 1, 3)
    nll_normalization: str = "per_dim"
    kind: str = "glow"

    @property
    def input_dim(self):
        return int(np.prod(self.input_shape))


def config_to_dict(cfg):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def config_from_dict(d):
    d = dict(d)
    if d.get("kind") == "maf":
        return MafConfig(**d)
    for key in ("input_shape", "kernel_sizes"):
        if key in d:
            d[key] = tuple(d[key])
    return GlowConfig(**d)


@dataclass(frozen=True)
class NllValue:
    value: float
    normalization: str
    dim: int

    @property
    def total(self):
        return self.value * self.dim if self.normalization == "per_dim" else self.value


class FlowModel:
    """An ordered stack of invertible layers over flat input vectors of length ``input_dim``.

    Split layers send half of their channels straight to the latent; the final
    latent ``z`` concatenates those pieces (in order) followed by the output of
    the last layer, flattened per sample.
    """

    def __init__(self, layers, input_dim, nll_normalization="total", config=None):
        if nll_normalization not in NORMALIZATIONS:
            raise ValueError(f"nll_normalization must be one of {NORMALIZATIONS}")
        self.layers = list(layers)
        self.input_dim = int(input_dim)
        self.nll_normalization = nll_normalization
        self.config = config
        for i, layer in enumerate(self.layers):
            layer.name = f"{layer.kind}[{i}]"
        self._latent_shapes = self._trace_shapes()

    def _trace_shapes(self):
        shape, pieces = (self.input_dim,), []
        for layer in self.layers:
            if isinstance(layer, Split):
                pieces.append(layer.factored_shape(shape))
            shape = layer.out_shape(shape)
        return pieces + [shape]

    @property
    def standardizer(self):
        return self.layers[0] if isinstance(self.layers[0], Standardize) else None

    def named_parameters(self):
        return {f"layers.{i}.{n}": p for i, layer in enumerate(self.layers) for n, p in layer.parameters().items()}

    def parameters(self):
        return list(self.named_parameters().values())

    def named_buffers(self):
        return {f"layers.{i}.{n}": b for i, layer in enumerate(self.layers) for n, b in layer.buffers().items()}

    def load_state(self, arrays):
        for name, p in self.named_parameters().items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name}")
            if arrays[name].shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arrays[name].shape} != {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        for i, layer in enumerate(self.layers):
            prefix = f"layers.{i}."
            own = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            if layer.buffers():
                layer.load_buffers(own)

    def state_arrays(self):
        state = {k: p.data.copy() for k, p in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def randomize(self, rng, scale=0.1):
        """Perturb every parameter (tests exercise models away from their identity init)."""
        for layer in self.layers:
            layer.randomize(rng, scale)
            if isinstance(layer, ActNorm):
                layer.initialized = True

    # -- data-dependent init ----------------------------------------------

    @property
    def needs_init(self):
        return any(isinstance(l, ActNorm) and not l.initialized for l in self.layers)

    def initialize(self, x):
        """Run actnorm data-dependent initialization layer by layer on batch ``x``."""
        with no_grad():
            h = Tensor(np.asarray(x, dtype=np.float64))
            for layer in self.layers:
                if isinstance(layer, Split):
                    h, _ = layer.split(h)
                    continue
                if isinstance(layer, ActNorm) and not layer.initialized:
                    layer.data_init(h.data)
                h, _ = layer.forward(h)

    # -- density ----------------------------------------------------------

    def forward(self, x):
        """Returns ``(z, log_det)``: z is [B, input_dim], log_det is [B]."""
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(f"expected input of shape [B, {self.input_dim}], got {h.shape}")
        batch = len(h)
        logdet = Tensor(np.zeros(batch))
        factored = []
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for i, layer in enumerate(self.layers):
                if isinstance(layer, Split):
                    h, piece = layer.split(h)
                    factored.append(piece.reshape(batch, -1))
                    continue
                with layer_scope(layer.name):
                    h, ld = layer.forward(h)
                if not (np.all(np.isfinite(h.data)) and np.all(np.isfinite(ld.data))):
                    raise NonFiniteActivation(i, layer.name)
                logdet = logdet + ld
        z = concat(factored + [h.reshape(batch, -1)], axis=1) if factored else h.reshape(batch, -1)
        return z, logdet

    def inverse(self, z):
        z = np.asarray(z, dtype=np.float64)
        batch = len(z)
        sizes = [int(np.prod(s)) for s in self._latent_shapes]
        chunks = np.split(z, np.cumsum(sizes)[:-1], axis=1)
        pieces = [c.reshape((batch,) + tuple(s)) for c, s in zip(chunks, self._latent_shapes)]
        h = pieces.pop()
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for i in range(len(self.layers) - 1, -1, -1):
                layer = self.layers[i]
                h = layer.merge(h, pieces.pop()) if isinstance(layer, Split) else layer.inverse(h)
                if not np.all(np.isfinite(h)):
                    raise NonFiniteActivation(i, layer.name, "inverse")
        return h

    def nll(self, x):
        """Per-sample NLL Tensor [B] in this model's normalization."""
        z, logdet = self.forward(x)
        d = self.input_dim
        with np.errstate(over="ignore", invalid="ignore"):
            total = (z * z).sum(axis=1) * 0.5 + 0.5 * d * LOG_2PI - logdet
        if not np.all(np.isfinite(total.data)):
            raise NonFiniteActivation(len(self.layers), "base")
        return total * (1.0 / d) if self.nll_normalization == "per_dim" else total

    def score(self, x, batch_size=256):
        """NLL as a float64 array, evaluated without a graph in chunks."""
        x = np.asarray(x, dtype=np.float64)
        with no_grad():
            return np.concatenate([self.nll(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)])

    def nll_values(self, x):
        return [NllValue(float(v), self.nll_normalization, self.input_dim) for v in self.score(x)]

    def sample(self, n, rng):
        return self.inverse(rng.standard_normal((n, self.input_dim)))


def build_maf(cfg=MafConfig(), rng=None):
    """Standardize -> n_blocks MADE blocks, reversing the autoregressive order between blocks."""
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = [Standardize(cfg.input_dim)]
    natural = np.arange(cfg.input_dim)
    for b in range(cfg.n_blocks):
        order = natural if b % 2 == 0 else natural[::-1]
        layers.append(MadeBlock(cfg.input_dim, cfg.hidden_units, cfg.mode, order, cfg.activation, cfg.clamp, rng))
    return FlowModel(layers, cfg.input_dim, cfg.nll_normalization, cfg)


def build_glow(cfg=GlowConfig(), rng=None):
    """Multi-scale Glow: per block squeeze, n_steps x (actnorm, mixing, coupling), then split."""
    rng = rng if rng is not None else np.random.default_rng(0)
    c, h, w = cfg.input_shape
    factor = 2**cfg.n_blocks
    if h % factor or w % factor:
        raise ShapeError(f"input {h}x{w} is not divisible by {factor} for {cfg.n_blocks} squeezes")
    # internal layout is channels-last: [time, mels, channels]
    shape = (h, w, c)
    layers = [Standardize(cfg.input_dim), Reshape((cfg.input_dim,), shape)]
    for b in range(cfg.n_blocks):
        layers.append(Squeeze())
        shape = layers[-1].out_shape(shape)
        for _ in range(cfg.n_steps):
            layers += [
                ActNorm(shape[-1]),
                InvertibleMixing(shape[-1], rng),
                Coupling(shape[-1], cfg.hidden_channels, cfg.mode, cfg.kernel_sizes, rng),
            ]
        if b < cfg.n_blocks - 1:
            layers.append(Split())
            shape = layers[-1].out_shape(shape)
    return FlowModel(layers, cfg.input_dim, cfg.nll_normalization, cfg)


def build_model(cfg, rng=None):
    return build_maf(cfg, rng) if cfg.kind == "maf" else build_glow(cfg, rng)
