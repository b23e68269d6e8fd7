"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Tensor], state: OptimizerState) -> None:
    """Apply one Adam update to ``params`` in place, then clear their grads.

    Moments are keyed by position in ``params``, so callers must pass the
    same list every step.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {p.name or i} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = p.grad.astype(np.float64)
        m = state.m.get(i)
        if m is None:
            m = np.zeros(p.shape)
            state.v[i] = np.zeros(p.shape)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        state.m[i] = m
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - upd).astype(p.data.dtype)
        p.grad = None
