"""Central finite-difference oracle for checking analytic gradients."""
import numpy as np

from .tensor import no_grad


def _scalar(value):
    return float(np.asarray(getattr(value, "data", value)).reshape(-1)[0])


def numerical_grad(fn, param, step=1e-5):
    """d fn() / d param.data by central differences; ``fn`` returns a scalar Tensor or float."""
    data = param.data
    grad = np.zeros(data.shape)
    with no_grad():
        for idx in np.ndindex(data.shape):
            orig = data[idx]
            data[idx] = orig + step
            hi = _scalar(fn())
            data[idx] = orig - step
            lo = _scalar(fn())
            data[idx] = orig
            grad[idx] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(fn, params, step=1e-5, floor=1e-6):
    """Return the max element-wise relative error between backprop and finite differences."""
    for p in params:
        p.zero_grad()
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = numerical_grad(fn, p, step)
        worst = max(worst, float(relative_error(analytic, numeric, floor).max(initial=0.0)))
    return worst
