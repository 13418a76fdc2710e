from .gradcheck import grad_check, numerical_grad
from .layers import (
    batchnorm,
    bilinear_matrix,
    concat_channels,
    conv2d,
    conv2d_strided2,
    conv2d_transposed,
    identity,
    maxpool2,
    relu,
    softmax_channels,
    split_channels,
    upsample_bilinear2x,
)
from .optim import Adam, AdamState, NonFiniteGradient, adam_step
from .params import ParamStore
from .tensor import ShapeError, Tensor, add, log, mul, neg, reshape, tsum

__all__ = [
    "Adam", "AdamState", "NonFiniteGradient", "ParamStore", "ShapeError", "Tensor",
    "adam_step", "add", "batchnorm", "bilinear_matrix", "concat_channels", "conv2d",
    "conv2d_strided2", "conv2d_transposed", "grad_check", "identity", "log", "maxpool2",
    "mul", "neg", "numerical_grad", "relu", "reshape", "softmax_channels",
    "split_channels", "tsum", "upsample_bilinear2x",
]
