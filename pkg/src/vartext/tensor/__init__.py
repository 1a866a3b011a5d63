"""From-scratch tensors with reverse-mode differentiation."""
from .core import (
    ShapeError,
    Tensor,
    add,
    clamp,
    concat,
    default_dtype,
    is_grad_enabled,
    log,
    mean_all,
    mul,
    no_grad,
    relu,
    scalar_mul,
    sigmoid,
    slice_channels,
    sub,
    sum_all,
    use_dtype,
)
from .gradcheck import grad_check
from .nn import (
    RunningStats,
    area_downsample,
    batchnorm,
    conv2d,
    maxpool2,
    resize_area,
    resize_bilinear,
)
from . import vtns

__all__ = [
    "ShapeError", "Tensor", "add", "clamp", "concat", "default_dtype", "is_grad_enabled",
    "log", "mean_all", "mul", "no_grad", "relu", "scalar_mul", "sigmoid", "slice_channels",
    "sub", "sum_all", "use_dtype", "grad_check", "RunningStats", "area_downsample",
    "batchnorm", "conv2d", "maxpool2", "resize_area", "resize_bilinear", "vtns",
]
