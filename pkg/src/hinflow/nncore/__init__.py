"""Minimal dense-tensor math with reverse-mode autodiff, layers, and Adam."""

from .tensor import (
    Tape,
    Tensor,
    add,
    attention,
    attention_qkv,
    attn_block_fused,
    concat,
    cumsum,
    gelu,
    layer_norm,
    matmul,
    mean_all,
    mse,
    mul,
    narrow,
    neg,
    reshape,
    scale,
    softmax,
    sub,
    sum_all,
    take_rows,
    tanh,
    transpose_last2,
)
from .layers import (
    attn_block,
    attn_block_params,
    linear,
    linear_params,
    ones_param,
    uniform_param,
    zeros_param,
)
from .optim import Adam, AdamState, adam_init, adam_step, clip_global_norm
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "attention",
    "attention_qkv",
    "attn_block_fused",
    "concat",
    "cumsum",
    "gelu",
    "layer_norm",
    "matmul",
    "mean_all",
    "mse",
    "mul",
    "narrow",
    "neg",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "sum_all",
    "take_rows",
    "tanh",
    "transpose_last2",
    "attn_block",
    "attn_block_params",
    "linear",
    "linear_params",
    "ones_param",
    "uniform_param",
    "zeros_param",
    "Adam",
    "AdamState",
    "adam_init",
    "adam_step",
    "clip_global_norm",
    "load_checkpoint",
    "save_checkpoint",
]
