"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """One Adam update, in place on the parameter tensors.

    Rejects non-finite gradients before touching any parameter so a bad
    batch never corrupts the model.
    """
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].data.shape:
            raise TrainingError(
                f"gradient shape {g.shape} != parameter shape "
                f"{params[name].data.shape} for {name!r}"
            )
    state.t += 1
    b1t = 1.0 - state.beta1**state.t
    b2t = 1.0 - state.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / b1t
        vhat = v / b2t
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


class Adam:
    """Convenience wrapper: clips by global norm (10.0), then steps."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip=10.0):
        self.params = params
        self.clip = clip
        self.state = adam_init(params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads: dict) -> float:
        if self.clip is not None:
            clip_global_norm(grads, self.clip)
        adam_step(self.params, grads, self.state)
        return self.state.t
