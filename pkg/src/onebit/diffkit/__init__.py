"""Small reverse-mode autodiff kernel: tape, primitives, layers and Adam."""

from onebit.diffkit.adam import AdamState, adam_step
from onebit.diffkit.layers import BatchNorm, Conv1d, Dense, GRUCell, Module
from onebit.diffkit.tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    batchnorm,
    bmv,
    bmv_t,
    concat,
    conv1d_same,
    dense,
    div,
    flatten,
    gru_cell,
    l2_norm,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scale,
    sigmoid,
    square,
    sub,
    sum_all,
    sum_last,
    take,
    tanh,
)

__all__ = [
    "AdamState",
    "BatchNorm",
    "Conv1d",
    "Dense",
    "GRUCell",
    "Module",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "batchnorm",
    "bmv",
    "bmv_t",
    "concat",
    "conv1d_same",
    "dense",
    "div",
    "flatten",
    "gru_cell",
    "l2_norm",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "square",
    "sub",
    "sum_all",
    "sum_last",
    "take",
    "tanh",
]
