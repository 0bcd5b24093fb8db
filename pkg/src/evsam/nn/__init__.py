"""Tensor engine: autodiff core, layer ops, gradient checking, modules."""
from .functional import (conv2d, conv_transpose2d, linear, normalize, pad_edge, resize_bilinear,
                         softmax, upsample2x)
from .gradcheck import grad_check
from .module import BatchNorm, Conv2d, ConvTranspose2d, LayerNorm, Linear, Module
from .tensor import (NonFiniteError, Tape, Tensor, add, backward, binary, clamp_min, concat, div, exp,
                     log, log_sigmoid, matmul, mean, mul, neg, power, record_macs, relu, reshape,
                     sigmoid, stack, sub, sum_, transpose, unary)
