"""Adam with coupled L2 weight decay."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0,
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Weight decay is added to the gradient before the moment estimates
    (classic L2, not decoupled).  Parameters without an entry in ``grads``
    are returned untouched and keep their moments.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    t = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        g = g.astype(p.dtype, copy=False)
        if weight_decay:
            g = g + weight_decay * p
        m_k = beta1 * m.get(name, np.zeros_like(p)) + (1 - beta1) * g
        v_k = beta2 * v.get(name, np.zeros_like(p)) + (1 - beta2) * (g * g)
        m[name], v[name] = m_k, v_k
        new_params[name] = (p - lr * (m_k / c1) / (np.sqrt(v_k / c2) + eps)).astype(p.dtype)
    return new_params, AdamState(t, m, v)
