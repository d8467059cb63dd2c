"""Float64 tensors, layer primitives, reverse-mode gradients and Adam."""

from . import tensor as ops
from .gradcheck import gradient_check
from .layers import (
    conv2d,
    embedding,
    leaky_relu,
    linear,
    log_softmax,
    minibatch_stddev,
    modulated_conv2d,
    modulated_weight,
    pixel_norm,
    softmax,
    upsample2x,
)
from .optim import AdamState, adam_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    square,
)
from .tensor import sum as tsum

__all__ = [
    "AdamState",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "concat",
    "conv2d",
    "embedding",
    "gradient_check",
    "leaky_relu",
    "linear",
    "log_softmax",
    "matmul",
    "mean",
    "minibatch_stddev",
    "modulated_conv2d",
    "modulated_weight",
    "mul",
    "ops",
    "pixel_norm",
    "reshape",
    "scale",
    "softmax",
    "square",
    "tsum",
    "upsample2x",
]
