"""Reverse-mode differentiation over a closed vocabulary of dense float64 ops.

Only the ops the flow layers need are provided: element-wise arithmetic with
broadcasting, matmul, reductions, tanh/relu/exp/log/sigmoid, reshaping and
indexing, channel concatenation, zero-padded 2-D convolution, and the
log-absolute-determinant of a square matrix.
"""
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from ..errors import NonFiniteGradient, ShapeError

_local = threading.local()


def _grad_enabled():
    return getattr(_local, "grad_enabled", True)


def _current_layer():
    stack = getattr(_local, "layers", None)
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, inverses)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextmanager
def layer_scope(name):
    """Tag every op created inside the block so backward errors can name it."""
    stack = getattr(_local, "layers", None)
    if stack is None:
        stack = _local.layers = []
    stack.append(name)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_layer")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._layer = _current_layer()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- graph traversal -------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(self._op, self._layer)
        if not self.requires_grad:
            return
        grads = {id(self): grad}
        # overflow surfaces as NonFiniteGradient below, not as a warning
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for node in reversed(_toposort(self)):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if node._backward is None:
                    node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if not np.all(np.isfinite(pg)):
                        raise NonFiniteGradient(node._op, node._layer)
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    out = Tensor(data)
    out._op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- element-wise --------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / b.data**2, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    exponent = float(exponent)
    return _result(
        a.data**exponent, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),), f"pow{exponent:g}",
    )


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


def sigmoid(a):
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- reductions and shape ------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    inverse = None if axes is None else tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, slice)) for p in parts)


def getitem(a, index):
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)), "concat",
    )


# -- linear algebra ------------------------------------------------------


def matmul(a, b):
    """``a @ b`` for ``a`` of shape [..., n, k] and a 2-D ``b`` of shape [k, m]."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape} not supported")

    k, m = b.shape

    def backward(g):
        ga = (g.reshape(-1, m) @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb

    # flatten leading dims so numpy issues one GEMM instead of a stack of small ones
    out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (m,))
    return _result(out, (a, b), backward, "matmul")


def masked_linear(x, weight, mask, bias=None):
    """``x @ (weight * mask) + bias`` with the mask held constant."""
    out = matmul(x, mul(weight, mask))
    return out if bias is None else add(out, bias)


def logabsdet(a):
    """log|det(a)| of a square matrix; gradient inv(a)^T."""
    sign, value = np.linalg.slogdet(a.data)
    if sign == 0:
        value = -np.inf
    return _result(
        np.asarray(value), (a,), lambda g: (g * np.linalg.inv(a.data).T,), "logabsdet"
    )


def _conv_same(x, w):
    """x [B, H, W, C] (*) w [kh, kw, C, O] with zero 'same' padding."""
    kh, kw, c, o = w.shape
    b, h, wd, _ = x.shape
    if kh == 1 and kw == 1:
        return (x.reshape(-1, c) @ w[0, 0]).reshape(b, h, wd, o)
    ph, pw = kh // 2, kw // 2
    if c <= o:
        # gather: one matmul over concatenated shifted inputs
        xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        cols = np.concatenate([xp[:, i:i + h, j:j + wd, :] for i in range(kh) for j in range(kw)], axis=-1)
        return (cols.reshape(-1, kh * kw * c) @ w.reshape(kh * kw * c, o)).reshape(b, h, wd, o)
    # scatter: per-offset contributions, then shifted accumulation into the output
    y = (x.reshape(-1, c) @ w.transpose(2, 0, 1, 3).reshape(c, kh * kw * o)).reshape(b, h, wd, kh, kw, o)
    out = np.zeros((b, h + 2 * ph, wd + 2 * pw, o))
    for i in range(kh):
        for j in range(kw):
            out[:, 2 * ph - i:2 * ph - i + h, 2 * pw - j:2 * pw - j + wd] += y[:, :, :, i, j]
    return out[:, ph:ph + h, pw:pw + wd]


def conv2d(x, weight, bias=None):
    """Stride-1 convolution with zero 'same' padding; NHWC input, HWIO odd kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d shapes {x.shape} * {weight.shape} not supported")
    kh, kw, c, o = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d needs odd kernel sizes")

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx = _conv_same(g, weight.data[::-1, ::-1].transpose(0, 1, 3, 2))
        if weight.requires_grad:
            b, h, wd, _ = x.shape
            g2 = g.reshape(-1, o)
            if kh == 1 and kw == 1:
                gw = (x.data.reshape(-1, c).T @ g2)[None, None]
            else:
                ph, pw = kh // 2, kw // 2
                xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
                gw = np.empty(weight.shape)
                for i in range(kh):
                    for j in range(kw):
                        gw[i, j] = xp[:, i:i + h, j:j + wd, :].reshape(-1, c).T @ g2
        return gx, gw

    out = _result(_conv_same(x.data, weight.data), (x, weight), backward, "conv2d")
    if bias is not None:
        out = add(out, bias)
    return out
