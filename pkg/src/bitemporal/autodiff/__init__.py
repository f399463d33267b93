"""Minimal reverse-mode autodiff kernel used by the encoder, head and decoder."""

from .gradcheck import gradient_check, numeric_gradient
from .ops import (EPS, ShapeError, absolute, add, avg_pool2, bce_with_logits, concat_channels,
                  conv2d, cosine_similarity, cosine_similarity_rows, dice_loss, l2_normalize,
                  l2_normalize_rows, mean, mul, neg, pretext_similarity_loss, relu, reshape, sigmoid,
                  stop_gradient, sub, sum_all, transpose, upsample_bilinear2x)
from .optim import MissingGradientError, OptimState, adamw_step, sgd_momentum_step
from .tensor import DTYPE, ParamSet, Tensor, tensor

__all__ = [
    "DTYPE", "EPS", "MissingGradientError", "OptimState", "ParamSet", "ShapeError", "Tensor",
    "absolute", "adamw_step", "add", "avg_pool2", "bce_with_logits", "concat_channels", "conv2d",
    "cosine_similarity", "cosine_similarity_rows", "dice_loss", "gradient_check", "l2_normalize",
    "l2_normalize_rows", "mean", "mul", "neg", "numeric_gradient", "pretext_similarity_loss", "relu",
    "reshape", "sgd_momentum_step", "sigmoid", "stop_gradient", "sub", "sum_all", "tensor",
    "transpose", "upsample_bilinear2x",
]
