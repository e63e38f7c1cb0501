"""Minimal dense-array engine: tensors, reverse-mode autodiff, layers, Adam."""

from mvecho.engine import backend
from mvecho.engine.functional import (
    batch_norm,
    bilstm_forward,
    binary_cross_entropy,
    conv2d_forward,
    depthwise_conv_forward,
    dropout,
    flatten,
    fully_connected_forward,
    global_average_pool,
    l2_loss,
    lstm_forward,
    multiclass_cross_entropy,
    pointwise_conv_forward,
    same_padding,
)
from mvecho.engine.gradcheck import check_gradients, numerical_gradient
from mvecho.engine.optim import Adam, AdamState, adam_step
from mvecho.engine.tensor import (
    Tensor,
    as_tensor,
    concat,
    exp,
    is_grad_enabled,
    log,
    log_softmax,
    matmul,
    no_grad,
    relu,
    sigmoid,
    softmax,
    stack,
    tanh,
)


def backward(loss):
    """Functional spelling of ``loss.backward()``."""
    loss.backward()


__all__ = [
    "Adam",
    "AdamState",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backend",
    "backward",
    "batch_norm",
    "bilstm_forward",
    "binary_cross_entropy",
    "check_gradients",
    "concat",
    "conv2d_forward",
    "depthwise_conv_forward",
    "dropout",
    "exp",
    "flatten",
    "fully_connected_forward",
    "global_average_pool",
    "is_grad_enabled",
    "l2_loss",
    "log",
    "log_softmax",
    "lstm_forward",
    "matmul",
    "multiclass_cross_entropy",
    "no_grad",
    "numerical_gradient",
    "pointwise_conv_forward",
    "relu",
    "same_padding",
    "sigmoid",
    "softmax",
    "stack",
    "tanh",
]
