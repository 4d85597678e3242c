from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from masd.nn.params import ParameterSet
from masd.nn.tensor import NumericError, ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    grads = dict(grads)
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def adam_step(params: ParameterSet, grads: Mapping[str, np.ndarray], state: AdamState) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update. Returns fresh params and state.

    Parameters absent from ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    step = state.step + 1
    m, v = dict(state.m), dict(state.v)
    updates = {}
    c1 = 1.0 - state.beta1**step
    c2 = 1.0 - state.beta2**step
    for name in sorted(grads):
        g = grads[name]
        m_prev = m.get(name, np.zeros_like(g))
        v_prev = v.get(name, np.zeros_like(g))
        m[name] = state.beta1 * m_prev + (1.0 - state.beta1) * g
        v[name] = state.beta2 * v_prev + (1.0 - state.beta2) * g * g
        m_hat = m[name] / c1
        v_hat = v[name] / c2
        updates[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, step, m, v)
    return params.replace(updates), new_state
