"""Minimal reverse-mode autodiff over float64 numpy arrays.

The graph is rebuilt on every forward pass (define-by-run); a single graph
is single-threaded, independent graphs may run concurrently.
"""

from .tensor import (
    Tensor,
    abs_,
    add,
    backward,
    bilinear_sample,
    concat,
    constant,
    cos,
    detach,
    div,
    exp,
    layernorm,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    param,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    sub,
    sum_,
    take,
    transpose,
)
from .optim import AdamW
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "abs_",
    "add",
    "backward",
    "bilinear_sample",
    "concat",
    "constant",
    "cos",
    "detach",
    "div",
    "exp",
    "layernorm",
    "log",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "mul",
    "neg",
    "param",
    "relu",
    "reshape",
    "sigmoid",
    "sin",
    "softmax",
    "sub",
    "sum_",
    "take",
    "transpose",
    "AdamW",
    "load_checkpoint",
    "save_checkpoint",
]
