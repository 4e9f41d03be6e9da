"""Finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tape, Tensor, tensor


def grad_check(fn: Callable[..., Tensor], point, eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``point`` is a Tensor, an array, or a list of them; arrays become
    differentiable leaves in the current default dtype.
    The error per coordinate is |g_ad - g_fd| / max(1, |g_fd|). With
    ``max_coords`` only a random subset of coordinates per tensor is probed.
    """
    items = [point] if isinstance(point, (Tensor, np.ndarray)) else list(point)
    tensors = [p if isinstance(p, Tensor) else tensor(p, requires_grad=True) for p in items]
    with Tape() as tape:
        out = fn(*tensors)
    analytic = tape.gradient(out, tensors)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g_ad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*tensors).data)
            flat[i] = orig - eps
            fm = float(fn(*tensors).data)
            flat[i] = orig
            g_fd = (fp - fm) / (2 * eps)
            err = abs(float(g_ad.reshape(-1)[i]) - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst
