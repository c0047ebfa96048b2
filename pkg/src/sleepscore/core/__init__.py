"""Array autodiff core: tensors, layers, losses, and the optimizer."""

from .tensor import (Tensor, clamp, concat, exp, log, matmul, set_check_finite,
                     sigmoid, softmax, stack, tanh, transpose)
from .layers import (AttentionOutput, AttentionParams, LstmCellParams,
                     additive_attention, bilstm, conv2d, global_avg_pool,
                     init_attention_params, init_lstm_params, leaky_relu,
                     linear, lstm_cell, max_pool2d, softmax_dense)
from .losses import FocalLossConfig, cross_entropy, focal_loss
from .optim import AdamState, adam_step

__all__ = [
    "Tensor", "clamp", "concat", "exp", "log", "matmul", "set_check_finite",
    "sigmoid", "softmax", "stack", "tanh", "transpose",
    "AttentionOutput", "AttentionParams", "LstmCellParams",
    "additive_attention", "bilstm", "conv2d", "global_avg_pool",
    "init_attention_params", "init_lstm_params", "leaky_relu", "linear",
    "lstm_cell", "max_pool2d", "softmax_dense",
    "FocalLossConfig", "cross_entropy", "focal_loss",
    "AdamState", "adam_step",
]
