"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamState:
    lr: float = 4e-3
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, grads: dict[str, np.ndarray] | None = None) -> None:
    """Update ``params`` in place from their ``.grad`` (or ``grads``) buffers.

    A non-finite gradient anywhere aborts before any parameter is touched.
    Parameters whose gradient is absent or identically zero are skipped
    (moments untouched), so a zero gradient never moves a parameter.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    resolved = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        resolved[name] = g

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = resolved.get(name)
        if g is None or not g.any():
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
