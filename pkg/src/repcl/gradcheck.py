"""Finite-difference verification of the reverse-mode tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter],
               eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``params``. Frozen
    parameters are skipped (their analytic gradient is exactly zero by
    contract). ``max_coords`` caps the number of probed coordinates per
    parameter; a seeded ``rng`` picks them, otherwise the first coordinates
    are used.
    """
    for p in params:
        p.tensor.zero_grad()
    loss = f()
    loss.backward()
    analytic = {}
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        analytic[p.name] = np.zeros_like(p.data) if g is None else g.copy()

    worst = 0.0
    for p in params:
        if not p.trainable:
            continue
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            if rng is not None:
                coords = rng.choice(n, size=max_coords, replace=False)
            else:
                coords = np.arange(max_coords)
        else:
            coords = np.arange(n)
        ga = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            err = abs(ga[i] - fd) / max(1.0, abs(ga[i]))
            if err > worst:
                worst = err
    return worst
