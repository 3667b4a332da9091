"""Minimal float64 differentiable-computation kernel."""
from .functional import (
    bce_with_logits,
    conv2d_forward,
    dense_forward,
    dropout,
    js_divergence_loss,
    layer_norm,
    log_softmax,
    masked_softmax,
    max_pool2d,
    softmax,
    weighted_squared_error,
)
from .gradcheck import grad_check, relative_error
from .layers import MLP, ConvStack, Dense, uniform_init
from .optim import AdamState, SGDState, adam_step, clip_grad_norm, optimizer_step, sgd_step
from .params import ParamStore, load_arrays, save_arrays
from .rng import RngStream
from .tensor import (
    Tensor,
    as_tensor,
    clip,
    concat,
    einsum,
    exp,
    log,
    matmul,
    no_grad,
    relu,
    sigmoid,
    softplus,
    stack,
    tanh,
)

__all__ = [
    "AdamState", "ConvStack", "Dense", "MLP", "ParamStore", "RngStream", "SGDState", "Tensor",
    "adam_step", "as_tensor", "bce_with_logits", "clip", "clip_grad_norm", "concat", "conv2d_forward", "dense_forward",
    "dropout", "einsum", "exp", "grad_check", "js_divergence_loss", "layer_norm", "load_arrays", "log",
    "log_softmax", "masked_softmax", "matmul", "max_pool2d", "no_grad", "optimizer_step",
    "relative_error", "relu", "save_arrays", "sgd_step", "sigmoid", "softmax", "softplus", "stack",
    "tanh", "uniform_init", "weighted_squared_error",
]
