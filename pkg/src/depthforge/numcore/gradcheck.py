"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def gradient_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor] | list[Tensor],
    n_samples: int = 100,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max over sampled coordinates of |analytic - fd| / max(1, |fd|).

    ``fn`` rebuilds the scalar loss from the current parameter values. Sampling
    is spread over all parameters; every parameter value is restored.
    """
    if isinstance(params, dict):
        params = list(params.values())
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    flat_ids = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fid in np.sort(flat_ids):
        pi = int(np.searchsorted(offsets, fid, side="right") - 1)
        p = params[pi]
        j = int(fid - offsets[pi])
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = fn().item()
        flat[j] = orig - h
        fm = fn().item()
        flat[j] = orig
        fd = (fp - fm) / (2.0 * h)
        a = analytic[pi].reshape(-1)[j]
        worst = max(worst, abs(a - fd) / max(1.0, abs(fd)))
    return worst
