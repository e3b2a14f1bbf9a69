from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from npi.autodiff.tensor import ContractError, Tensor


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, then zero the gradients."""
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient buffer")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ContractError("parameter list changed between Adam steps")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    step_size = state.lr / c1
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        p.data -= (step_size * m / denom).astype(p.data.dtype, copy=False)
        g.fill(0)


def grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel().astype(np.float64)))
    return total**0.5


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most max_norm."""
    norm = grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(s)
    return norm
