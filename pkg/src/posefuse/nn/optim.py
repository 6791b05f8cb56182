from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 0.01, beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
    """One bias-corrected Adam update.  Returns new parameter arrays; inputs are not mutated."""
    state.t += 1
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[k], state.v[k] = m, v
        m_hat = m / (1.0 - beta1 ** state.t)
        v_hat = v / (1.0 - beta2 ** state.t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, state
