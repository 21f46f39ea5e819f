"""Reverse-mode automatic differentiation over dense float64 arrays."""

from .check import check_gradients, check_param_gradients
from .graph import (
    DTYPE,
    Node,
    add,
    backward,
    concat,
    constant,
    conv2d,
    conv_transpose2d,
    detach,
    div,
    elu,
    eval_forward,
    exp,
    getitem,
    grad_backward,
    layer_norm,
    leaf,
    lift,
    log,
    logsumexp,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    placeholder,
    power,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)
from .layers import (
    ConvDecoder,
    ConvEncoder,
    ConvSpec,
    GruParams,
    LayerNorm,
    Linear,
    Mlp,
    MlpSpec,
    ParamStore,
    gru_cell,
    mlp_apply,
)
from .serialize import load_arrays, save_arrays

DiffNode = Node

__all__ = [name for name in dir() if not name.startswith("_")]
