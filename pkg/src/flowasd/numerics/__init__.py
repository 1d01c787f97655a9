from .optim import (
    Optimizer,
    OptimizerState,
    adam_step,
    adamax_step,
    clip_grad_norm,
    global_grad_norm,
    optimizer_step,
)
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    div,
    exp,
    layer_scope,
    log,
    logabsdet,
    masked_linear,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    sub,
    sum_,
    tanh,
    transpose,
)


def forward_backward(loss_fn, params):
    """Zero the grads of ``params``, evaluate ``loss_fn()`` and backpropagate.

    Returns ``(loss_value, [grad for each param])``.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    return loss.item(), [p.grad for p in params]
