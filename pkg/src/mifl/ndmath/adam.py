"""Adam optimizer with bias correction, operating on lists of arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-parameter moment estimates plus hyperparameters.

    ``m`` and ``v`` mirror the parameter shapes; ``t`` counts completed
    steps and increments by exactly one per :func:`adam_step`.
    """

    m: list = field(repr=False)
    v: list = field(repr=False)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Fresh zero-moment state matching the given parameter list."""
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    return AdamState(m=m, v=v, t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state):
    """One Adam update; returns (new params, new state), inputs untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} moment slots"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(
                f"adam_step: shape mismatch param {p.shape} vs grad {g.shape} "
                f"vs state {m.shape}"
            )
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * g * g
        step = state.lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + state.eps)
        new_params.append((p - step).astype(p.dtype, copy=False))
        new_m.append(m2)
        new_v.append(v2)
    return new_params, AdamState(
        m=new_m, v=new_v, t=t, lr=state.lr, beta1=b1, beta2=b2, eps=state.eps
    )
