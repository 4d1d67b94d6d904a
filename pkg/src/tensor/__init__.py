# Tensor + reverse-mode autodiff package
from .autograd import Tensor, Function, Graph, backward, zero_grad, no_grad, DEFAULT_DTYPE
from .ops import (
    add, sub, mul, neg, scale, exp, gelu, matmul, linear, softmax, log_softmax,
    layer_norm, reshape, permute, getitem, concat, split, expand_batch,
    avg_pool2d, upsample_nearest, stop_gradient, mean,
)
from .gradcheck import gradcheck, gradcheck_report, numerical_grad, relative_error
