"""Dense tensor math, reverse-mode gradients, Adam and a gradient checker."""

from .gradcheck import finite_diff_check
from .io import CheckpointError, atomic_write_bytes, load_params, save_params
from .optim import AdamState, FrozenParameterError, NonFiniteGradientError, adam_step
from .tensor import (
    GraphError,
    ShapeError,
    Tensor,
    add,
    backward,
    bce_with_logits,
    cross_entropy,
    dropout,
    embedding,
    index,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sequence_nll,
    softmax,
    total,
    transpose,
    weighted_sum,
    zero_grad,
)

__all__ = [
    "AdamState", "CheckpointError", "FrozenParameterError", "GraphError",
    "NonFiniteGradientError", "ShapeError", "Tensor", "adam_step", "add",
    "atomic_write_bytes", "backward", "bce_with_logits", "cross_entropy",
    "dropout", "embedding", "finite_diff_check", "index", "layer_norm",
    "load_params", "log_softmax", "matmul", "mean", "mul", "no_grad", "relu",
    "reshape", "save_params", "scale", "sequence_nll", "softmax", "total",
    "transpose", "weighted_sum", "zero_grad",
]
