"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(f: Callable[..., Tensor], *points, h: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the given tensors to a scalar tensor. Each coordinate ``i``
    is stepped by ``h * max(1, |x_i|)`` and the error is
    ``|a - n| / max(1, |a|, |n|)``. With ``max_coords`` only that many
    coordinates per point are sampled (deterministically from ``seed``).
    A non-finite evaluation counts as an infinite error.
    """
    leaves = [p if isinstance(p, Tensor) else Tensor(p) for p in points]
    for p in leaves:
        p.requires_grad = True
        p.grad = None
    loss = f(*leaves)
    if not np.isfinite(loss.data).all():
        return float("inf")
    backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in leaves:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            with no_grad():
                flat[i] = orig + step
                fp = f(*leaves).item()
                flat[i] = orig - step
                fm = f(*leaves).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            if not (np.isfinite(num) and np.isfinite(a)):
                return float("inf")
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
