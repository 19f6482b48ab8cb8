"""Dense tensor substrate: reverse-mode autodiff, layers, SGD, checkpoints,
and a finite-difference gradient-check oracle."""

from .tensor import (
    Tensor, as_tensor, no_grad, default_dtype, get_default_dtype,
    add, sub, mul, div, exp, log, sqrt, tanh, pow_,
    reshape, transpose, swapaxes, concat, broadcast_to, getitem, index_select,
    sum_, mean, matmul,
)
from .ops import (
    gelu, sigmoid, softplus, softmax, log_softmax, minimum, maximum,
    layer_norm, linear, conv2d, max_pool, avg_pool, upsample_nearest,
    mse, bce_with_logits,
)
from .nn import Parameter, Module, Linear, Conv2d, LayerNorm, MultiHeadAttention, Mlp, \
    multi_head_attention
from .optim import sgd_step
from .gradcheck import grad_check, GradCheckReport, ParamReport
from .checkpoint import save_checkpoint, load_checkpoint, load_into

__all__ = [
    "Tensor", "as_tensor", "no_grad", "default_dtype", "get_default_dtype",
    "add", "sub", "mul", "div", "exp", "log", "sqrt", "tanh", "pow_",
    "reshape", "transpose", "swapaxes", "concat", "broadcast_to", "getitem",
    "index_select", "sum_", "mean", "matmul",
    "gelu", "sigmoid", "softplus", "softmax", "log_softmax", "minimum", "maximum",
    "layer_norm", "linear", "conv2d", "max_pool", "avg_pool", "upsample_nearest",
    "mse", "bce_with_logits",
    "Parameter", "Module", "Linear", "Conv2d", "LayerNorm", "MultiHeadAttention",
    "Mlp", "multi_head_attention",
    "sgd_step", "grad_check", "GradCheckReport", "ParamReport",
    "save_checkpoint", "load_checkpoint", "load_into",
]
