"""Adam with bias correction, in functional style.

Parameters are immutable tensors, so a step returns fresh parameter tensors
plus the updated moment state instead of mutating anything:

    m <- b1*m + (1-b1)*g         v <- b2*v + (1-b2)*g^2
    p <- p - lr * (m/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """First/second moment estimates per parameter and the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_adam(params: dict) -> AdamState:
    m = {name: np.zeros_like(t.data) for name, t in params.items()}
    v = {name: np.zeros_like(t.data) for name, t in params.items()}
    return AdamState(m=m, v=v, step=0)


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One update over named parameters; returns (new params, new state)."""
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError(f"adam_step: betas must lie in [0,1), got {beta1}, {beta2}")
    if lr <= 0 or eps <= 0:
        raise ValueError(f"adam_step: lr and eps must be positive, got lr={lr}, eps={eps}")
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise KeyError(f"adam_step: params and grads must share names, mismatched: {missing}")
    if set(params) != set(state.m):
        raise KeyError("adam_step: state does not match parameter names; was it initialized for these params?")

    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params: dict = {}
    new_m: dict = {}
    new_v: dict = {}
    # divergence surfaces as non-finite params, which the caller checks for
    with np.errstate(over="ignore", invalid="ignore"):
        for name, p in params.items():
            g = grads[name]
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            if g.shape != p.shape:
                raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
            dt = p.data.dtype.type
            m = dt(beta1) * state.m[name] + dt(1.0 - beta1) * g
            v = dt(beta2) * state.v[name] + dt(1.0 - beta2) * (g * g)
            update = (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(eps))
            new_params[name] = Tensor._wrap(p.data - dt(lr) * update, requires_grad=True)
            new_m[name] = m
            new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)
