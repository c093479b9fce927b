"""Dense-tensor substrate with reverse-mode automatic differentiation."""

from commformer.diffmath.functional import (
    embedding_lookup,
    gelu,
    layer_norm,
    log_softmax,
    masked_softmax,
    straight_through,
    take_along_last,
)
from commformer.diffmath.gradcheck import GradcheckReport, gradcheck, relative_error
from commformer.diffmath.layers import LayerNorm, Linear, MLP
from commformer.diffmath.optim import SGD, Adam, clip_grad_norm, global_grad_norm
from commformer.diffmath.params import ParameterStore, orthogonal
from commformer.diffmath.tensor import (
    Tensor,
    clip,
    concat,
    constant,
    exp,
    huber,
    is_grad_enabled,
    log,
    matmul,
    minimum,
    no_grad,
    stack,
    tanh,
    where,
)

__all__ = [
    "Adam",
    "GradcheckReport",
    "LayerNorm",
    "Linear",
    "MLP",
    "ParameterStore",
    "SGD",
    "Tensor",
    "clip",
    "clip_grad_norm",
    "concat",
    "constant",
    "embedding_lookup",
    "exp",
    "gelu",
    "global_grad_norm",
    "gradcheck",
    "huber",
    "is_grad_enabled",
    "layer_norm",
    "log",
    "log_softmax",
    "masked_softmax",
    "matmul",
    "minimum",
    "no_grad",
    "orthogonal",
    "relative_error",
    "stack",
    "straight_through",
    "take_along_last",
    "tanh",
    "where",
]
