"""Reverse-mode autodiff over 4-D numpy arrays."""

from .gradcheck import grad_check, kink_distance
from .ops import (
    BatchNormState,
    add,
    add_bias,
    batch_norm,
    concat_channels,
    conv2d,
    conv2d_transpose,
    fully_connected,
    global_avg_pool,
    inner,
    maxpool2d,
    relu,
    scale,
    softmax,
    softmax_cross_entropy,
    sum_all,
    track_kinks,
)
from .tensor import (
    DimensionError,
    Graph,
    Tensor,
    backward,
    get_default_dtype,
    no_grad,
    precision,
    set_debug_finite,
    set_default_dtype,
)

__all__ = [
    "BatchNormState", "DimensionError", "Graph", "Tensor", "add", "add_bias", "backward", "batch_norm",
    "concat_channels", "conv2d", "conv2d_transpose", "fully_connected", "get_default_dtype",
    "global_avg_pool", "grad_check", "inner", "kink_distance", "maxpool2d", "no_grad",
    "precision", "relu", "scale", "set_debug_finite", "set_default_dtype", "softmax",
    "softmax_cross_entropy", "sum_all", "track_kinks",
]
