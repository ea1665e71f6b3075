"""Adam with bias correction over a dict of named numpy parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class AdamState:
    lr: float = 8e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """Update ``params`` in place and return them.

    Parameters absent from ``grads`` are skipped entirely: their moments are
    neither decayed nor updated. The step counter always advances.
    """
    if state.step < 0:
        raise ContractError("Adam step counter must be >= 0")
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype, copy=False)
    return params
