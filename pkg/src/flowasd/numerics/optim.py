"""Adam and AdaMax with bias correction, operating on plain float64 arrays."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteGradient, ShapeError

KINDS = ("adam", "adamax")


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.step_count < 0:
            raise ValueError("step_count must be non-negative")


def _check(state, params, grads):
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ShapeError(f"param {i} has shape {np.shape(p)}, grad {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("optimizer", f"param {i}")
    if not state.first_moment:
        state.first_moment = [np.zeros(np.shape(p)) for p in params]
        state.second_moment = [np.zeros(np.shape(p)) for p in params]
    for i, (p, m) in enumerate(zip(params, state.first_moment)):
        if m.shape != np.shape(p):
            raise ShapeError(f"moment buffer {i} has shape {m.shape}, param {np.shape(p)}")


def adam_step(state, params, grads):
    """One bias-corrected Adam update. Returns (new_params, state); state is updated in place."""
    _check(state, params, grads)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.first_moment[i] = b1 * state.first_moment[i] + (1 - b1) * g
        v = state.second_moment[i] = b2 * state.second_moment[i] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon))
    return out, state


def adamax_step(state, params, grads):
    """One AdaMax update; the second moment is the exponentially weighted infinity norm."""
    _check(state, params, grads)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.first_moment[i] = b1 * state.first_moment[i] + (1 - b1) * g
        u = state.second_moment[i] = np.maximum(b2 * state.second_moment[i], np.abs(g))
        step = state.learning_rate / (1 - b1**t)
        out.append(p - step * m / (u + state.epsilon))
    return out, state


def optimizer_step(state, params, grads):
    return (adam_step if state.kind == "adam" else adamax_step)(state, params, grads)


class Optimizer:
    """Applies an :class:`OptimizerState` to a list of parameter Tensors in place."""

    def __init__(self, params, state):
        self.params = list(params)
        self.state = state

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, _ = optimizer_step(self.state, [p.data for p in self.params], grads)
        for p, value in zip(self.params, new):
            p.data = value


def _norm_parts(params):
    """Global L2 norm as ``(m, r)`` with norm = m * r; scaling by the largest entry avoids overflow."""
    grads = [p.grad for p in params if p.grad is not None]
    m = max((float(np.max(np.abs(g))) for g in grads if g.size), default=0.0)
    if m == 0.0 or not np.isfinite(m):
        return m, 1.0
    return m, float(np.sqrt(sum(float(np.sum(np.square(g / m))) for g in grads)))


def global_grad_norm(params):
    m, r = _norm_parts(params)
    with np.errstate(over="ignore"):
        return m * r


def clip_grad_norm(params, max_norm):
    """Rescale grads so their global L2 norm is at most ``max_norm``. Returns the pre-clip norm."""
    m, r = _norm_parts(params)
    with np.errstate(over="ignore"):
        norm = m * r
    if norm > max_norm:
        scale = (max_norm / m) / r
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
