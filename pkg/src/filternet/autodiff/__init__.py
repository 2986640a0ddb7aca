"""Minimal reverse-mode autodiff engine and the layers the networks are built from."""

from .tensor import Tensor, as_tensor, make_result, no_grad
from .functional import (batch_norm, concat, conv2d_slicewise, conv3d, maxpool3d, relu,
                         softmax_channels, upsample_nn)
from .layers import (BatchNorm3d, BlockA, BlockB, BlockSpec, Conv3d, ConvSpec, Module,
                     UpConv, make_block)
from .gradcheck import check_gradients, numerical_gradient, relative_error

__all__ = [
    "Tensor", "as_tensor", "make_result", "no_grad",
    "batch_norm", "concat", "conv2d_slicewise", "conv3d", "maxpool3d", "relu",
    "softmax_channels", "upsample_nn",
    "BatchNorm3d", "BlockA", "BlockB", "BlockSpec", "Conv3d", "ConvSpec", "Module",
    "UpConv", "make_block",
    "check_gradients", "numerical_gradient", "relative_error",
]
