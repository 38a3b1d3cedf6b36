from .tensor import Graph, Tensor, as_tensor, backward, is_grad_enabled, no_grad
from .ops import (
    add, add_norm, concat, conv2d, div, dropout, exp, getitem, global_pool, layer_norm,
    linear, log, matmul, mean, mul, power, relu, reshape, resample_nearest, sigmoid,
    softmax, softplus, sub, sum, swap_last, transpose,
)
from .gradcheck import GradCheckReport, grad_check, relative_error
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Graph", "Tensor", "as_tensor", "backward", "is_grad_enabled", "no_grad",
    "add", "add_norm", "concat", "conv2d", "div", "dropout", "exp", "getitem", "global_pool",
    "layer_norm", "linear", "log", "matmul", "mean", "mul", "power", "relu", "reshape",
    "resample_nearest", "sigmoid", "softmax", "softplus", "sub", "sum", "swap_last", "transpose",
    "GradCheckReport", "grad_check", "relative_error", "load_checkpoint", "save_checkpoint",
]
