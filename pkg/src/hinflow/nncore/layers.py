"""Parameter factories and the attention block used by both models."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_param(rng, fan_in, shape) -> Tensor:
    """Weight drawn uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def linear_params(rng, fan_in, fan_out, zero=False):
    """(W, b) for a dense layer; `zero` requests a zero-initialized head."""
    if zero:
        w = zeros_param((fan_in, fan_out))
    else:
        w = uniform_param(rng, fan_in, (fan_in, fan_out))
    return w, zeros_param((fan_out,))


def linear(x, w, b):
    return T.add(T.matmul(x, w), b)


def attn_block_params(rng, width, with_mlp, mlp_hidden=None):
    """Parameter dict for one pre-norm self-attention block.

    Query/key/value projections live in one fused (width, 3*width) matrix.
    """
    p = {
        "ln1.g": ones_param((width,)),
        "ln1.b": zeros_param((width,)),
        "wqkv": uniform_param(rng, width, (width, 3 * width)),
    }
    if with_mlp:
        hidden = mlp_hidden or width
        p["ln2.g"] = ones_param((width,))
        p["ln2.b"] = zeros_param((width,))
        p["w1"], p["b1"] = linear_params(rng, width, hidden)
        p["w2"], p["b2"] = linear_params(rng, hidden, width)
    return p


def attn_block(x, params, prefix):
    """Apply one block to tokens x of shape (B, n, width).

    Residual structure: x + attn(LN(x)), then optionally x + MLP(LN(x)).
    """
    b, n, d = x.shape

    def get(name):
        return params[f"{prefix}.{name}"]

    x = T.attn_block_fused(x, get("ln1.g"), get("ln1.b"), get("wqkv"))
    if f"{prefix}.w1" in params:
        h = T.layer_norm(x, get("ln2.g"), get("ln2.b"))
        h = T.reshape(h, (b * n, d))
        h = T.gelu(linear(h, get("w1"), get("b1")))
        h = linear(h, get("w2"), get("b2"))
        x = T.add(x, T.reshape(h, (b, n, d)))
    return x
