"""Invertible layers.

Every layer maps a batch ``x`` to ``(y, log_det)`` where ``log_det`` has one
entry per sample, and provides a numpy ``inverse``. Parameters are float64
Tensors; buffers are plain arrays that are checkpointed but not optimized.
"""
import numpy as np

from ..numerics import Tensor, concat, conv2d, layer_scope, logabsdet, masked_linear, no_grad, sigmoid
from ..errors import ShapeError

SCALE_SHIFT = 2.0
SCALE_FLOOR = 1e-3


def scale_clamp(raw):
    """Bounded positive scale for affine transforms: sigmoid(raw + 2) + 1e-3, in (0.001, 1.001)."""
    if isinstance(raw, Tensor):
        return sigmoid(raw + SCALE_SHIFT) + SCALE_FLOOR
    from scipy.special import expit

    return expit(np.asarray(raw, dtype=np.float64) + SCALE_SHIFT) + SCALE_FLOOR


def _zeros_logdet(batch):
    return Tensor(np.zeros(batch))


class FlowLayer:
    kind = "layer"

    def __init__(self):
        self.name = self.kind

    def parameters(self):
        """Ordered ``{name: Tensor}``."""
        return {}

    def buffers(self):
        return {}

    def load_buffers(self, arrays):
        pass

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError

    def randomize(self, rng, scale=0.1):
        for p in self.parameters().values():
            p.data = p.data + rng.normal(scale=scale, size=p.shape)


class Standardize(FlowLayer):
    """Fixed per-feature affine map (x - mean) / std; part of the density, not trained."""

    kind = "standardize"

    def __init__(self, dim):
        super().__init__()
        self.mean = np.zeros(dim)
        self.std = np.ones(dim)

    def set(self, mean, std):
        mean, std = np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
        if mean.shape != self.mean.shape or std.shape != self.std.shape or np.any(std <= 0):
            raise ShapeError("standardization statistics must match the input dim with std > 0")
        self.mean, self.std = mean, std

    def forward(self, x):
        y = (x - self.mean) * (1.0 / self.std)
        return y, Tensor(np.full(len(x), -np.sum(np.log(self.std))))

    def inverse(self, y):
        return y * self.std + self.mean

    def randomize(self, rng, scale=0.1):
        pass


class MadeBlock(FlowLayer):
    """Masked autoregressive transform x -> z; z_i depends on x_j only for j earlier in ``order``.

    ``mode`` is "additive" (z = x - mu) or "affine" (z = (x - mu) / s, i.e. the
    generative map x = mu + s * z). With ``clamp`` the scale is
    ``scale_clamp(raw)``; without it, s = exp(raw).
    """

    kind = "made"

    def __init__(self, dim, hidden_units=512, mode="additive", order=None, activation="tanh",
                 clamp=True, rng=None):
        super().__init__()
        if mode not in ("additive", "affine"):
            raise ValueError(f"unknown MADE mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.hidden_units, self.mode = dim, hidden_units, mode
        self.activation, self.clamp = activation, clamp
        self.order = np.arange(dim) if order is None else np.asarray(order)
        if sorted(self.order.tolist()) != list(range(dim)):
            raise ValueError("order must be a permutation of range(dim)")
        degree_in = np.empty(dim, dtype=int)
        degree_in[self.order] = np.arange(1, dim + 1)
        degree_hidden = np.arange(hidden_units) % max(dim - 1, 1) + 1 if dim > 1 else np.zeros(hidden_units, int)
        self.mask1 = (degree_hidden[None, :] >= degree_in[:, None]).astype(np.float64)
        mask2 = (degree_in[None, :] > degree_hidden[:, None]).astype(np.float64)
        n_out = 1 if mode == "additive" else 2
        self.mask2 = np.tile(mask2, (1, n_out))
        self.w1 = Tensor(rng.normal(scale=1.0 / np.sqrt(dim), size=(dim, hidden_units)), True)
        self.b1 = Tensor(np.zeros(hidden_units), True)
        self.w2 = Tensor(np.zeros((hidden_units, n_out * dim)), True)
        self.b2 = Tensor(np.zeros(n_out * dim), True)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def _conditioner(self, x):
        pre = masked_linear(x, self.w1, self.mask1, self.b1)
        hidden = pre.tanh() if self.activation == "tanh" else pre.relu()
        out = masked_linear(hidden, self.w2, self.mask2, self.b2)
        return out[:, :self.dim], (out[:, self.dim:] if self.mode == "affine" else None)

    def forward(self, x):
        with layer_scope(self.name):
            mu, raw = self._conditioner(x)
            if self.mode == "additive":
                return x - mu, _zeros_logdet(len(x))
            if self.clamp:
                scale = scale_clamp(raw)
                return (x - mu) / scale, -scale.log().sum(axis=1)
            return (x - mu) * (-raw).exp(), -raw.sum(axis=1)

    def inverse(self, y):
        """Sequential inversion in ``order``; the hidden pre-activation is updated one input at a time."""
        y = np.asarray(y, dtype=np.float64)
        x = np.zeros_like(y)
        w1 = self.w1.data * self.mask1
        w2 = self.w2.data * self.mask2
        b2 = self.b2.data
        pre = np.tile(self.b1.data, (len(y), 1))
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            for d in self.order:
                hidden = np.tanh(pre) if self.activation == "tanh" else np.maximum(pre, 0.0)
                mu = hidden @ w2[:, d] + b2[d]
                if self.mode == "additive":
                    xd = y[:, d] + mu
                else:
                    raw = hidden @ w2[:, self.dim + d] + b2[self.dim + d]
                    scale = scale_clamp(raw) if self.clamp else np.exp(raw)
                    xd = y[:, d] * scale + mu
                x[:, d] = xd
                pre += np.outer(xd, w1[d])
        return x


class Reshape(FlowLayer):
    kind = "reshape"

    def __init__(self, in_shape, out_shape):
        super().__init__()
        self.in_shape, self.shape = tuple(in_shape), tuple(out_shape)
        if np.prod(self.in_shape) != np.prod(self.shape):
            raise ShapeError(f"cannot reshape {in_shape} to {out_shape}")

    def out_shape(self, shape):
        return self.shape

    def forward(self, x):
        return x.reshape((len(x),) + self.shape), _zeros_logdet(len(x))

    def inverse(self, y):
        return y.reshape((len(y),) + self.in_shape)


class Squeeze(FlowLayer):
    """[H, W, C] -> [H/2, W/2, 4C] by folding 2x2 spatial neighbourhoods into channels."""

    kind = "squeeze"

    def out_shape(self, shape):
        h, w, c = shape
        if h % 2 or w % 2:
            raise ShapeError(f"cannot squeeze spatial dims {h}x{w}: not divisible by 2")
        return (h // 2, w // 2, 4 * c)

    def forward(self, x):
        b, h, w, c = x.shape
        y = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        return y.reshape(b, h // 2, w // 2, 4 * c), _zeros_logdet(b)

    def inverse(self, y):
        b, h2, w2, c4 = y.shape
        x = y.reshape(b, h2, w2, 2, 2, c4 // 4).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, 2 * h2, 2 * w2, c4 // 4)


class Split(FlowLayer):
    """Multi-scale split: the second half of the channels leaves for the latent."""

    kind = "split"

    def out_shape(self, shape):
        h, w, c = shape
        return (h, w, c - c // 2)

    def factored_shape(self, shape):
        h, w, c = shape
        return (h, w, c // 2)

    def split(self, x):
        keep = x.shape[-1] - x.shape[-1] // 2
        return x[..., :keep], x[..., keep:]

    def merge(self, kept, factored):
        return np.concatenate([kept, factored], axis=-1)


class ActNorm(FlowLayer):
    """Per-channel (x + bias) * exp(logs), initialized from the first batch to zero mean, unit std."""

    kind = "actnorm"

    def __init__(self, channels):
        super().__init__()
        self.bias = Tensor(np.zeros(channels), True)
        self.logs = Tensor(np.zeros(channels), True)
        self.initialized = False

    def parameters(self):
        return {"bias": self.bias, "logs": self.logs}

    def buffers(self):
        return {"initialized": np.array([float(self.initialized)])}

    def load_buffers(self, arrays):
        self.initialized = bool(arrays["initialized"][0])

    def data_init(self, x):
        x = np.asarray(x)
        mean = x.mean(axis=(0, 1, 2))
        std = x.std(axis=(0, 1, 2))
        self.bias.data = -mean
        self.logs.data = -np.log(std + 1e-6)
        self.initialized = True

    def forward(self, x):
        with layer_scope(self.name):
            hw = x.shape[1] * x.shape[2]
            y = (x + self.bias) * self.logs.exp()
            logdet = self.logs.sum() * float(hw)
            return y, logdet + _zeros_logdet(len(x))

    def inverse(self, y):
        return y * np.exp(-self.logs.data) - self.bias.data


class InvertibleMixing(FlowLayer):
    """Invertible 1x1 convolution: a learned C x C channel-mixing matrix."""

    kind = "mixing"

    def __init__(self, channels, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
        self.weight = Tensor(q, True)

    def parameters(self):
        return {"weight": self.weight}

    def forward(self, x):
        with layer_scope(self.name):
            hw = x.shape[1] * x.shape[2]
            y = x @ self.weight.T
            return y, logabsdet(self.weight) * float(hw) + _zeros_logdet(len(x))

    def inverse(self, y):
        return y @ np.linalg.inv(self.weight.data).T

    def randomize(self, rng, scale=0.1):
        self.weight.data = self.weight.data + rng.normal(scale=scale, size=self.weight.shape)


class Coupling(FlowLayer):
    """Channel coupling: the first half conditions an additive or affine map of the second half.

    The conditioner is conv(k0) -> relu -> conv(k1) -> relu -> conv(k2) with the
    last convolution zero-initialized, so a fresh additive coupling is the identity.
    """

    kind = "coupling"

    def __init__(self, channels, hidden_channels=128, mode="additive", kernel_sizes=(3, 1, 3), rng=None):
        super().__init__()
        if mode not in ("additive", "affine"):
            raise ValueError(f"unknown coupling mode {mode!r}")
        if channels < 2:
            raise ShapeError("coupling needs at least 2 channels")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mode = mode
        self.c_cond = channels // 2
        self.c_trans = channels - self.c_cond
        n_out = self.c_trans * (1 if mode == "additive" else 2)
        k0, k1, k2 = kernel_sizes

        def init(c_out, c_in, k):
            return Tensor(rng.normal(scale=1.0 / np.sqrt(c_in * k * k), size=(k, k, c_in, c_out)), True)

        self.w0, self.b0 = init(hidden_channels, self.c_cond, k0), Tensor(np.zeros(hidden_channels), True)
        self.w1, self.b1 = init(hidden_channels, hidden_channels, k1), Tensor(np.zeros(hidden_channels), True)
        self.w2 = Tensor(np.zeros((k2, k2, hidden_channels, n_out)), True)
        self.b2 = Tensor(np.zeros(n_out), True)

    def parameters(self):
        return {"w0": self.w0, "b0": self.b0, "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def _conditioner(self, xa):
        h = conv2d(xa, self.w0, self.b0).relu()
        h = conv2d(h, self.w1, self.b1).relu()
        out = conv2d(h, self.w2, self.b2)
        if self.mode == "additive":
            return out, None
        return out[..., :self.c_trans], out[..., self.c_trans:]

    def forward(self, x):
        with layer_scope(self.name):
            xa, xb = x[..., :self.c_cond], x[..., self.c_cond:]
            shift, raw = self._conditioner(xa)
            if self.mode == "additive":
                return concat([xa, xb + shift], axis=-1), _zeros_logdet(len(x))
            scale = scale_clamp(raw)
            yb = (xb + shift) * scale
            return concat([xa, yb], axis=-1), scale.log().sum(axis=(1, 2, 3))

    def inverse(self, y):
        y = np.asarray(y, dtype=np.float64)
        ya, yb = y[..., :self.c_cond], y[..., self.c_cond:]
        with no_grad():
            shift, raw = self._conditioner(Tensor(ya))
        if self.mode == "additive":
            xb = yb - shift.data
        else:
            xb = yb / scale_clamp(raw.data) - shift.data
        return np.concatenate([ya, xb], axis=-1)
