"""Adaptive-moment optimizer with lazy rows for the prompt pool."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


class Adam:
    """Standard bias-corrected Adam.

    Parameters registered with sparse_rows=True (pool prompts/keys) update
    only rows that actually received gradient this step, so unselected
    prompts and keys are bit-identical after the step.
    """

    def __init__(self, params: list[Parameter], lr: float = 1.875e-3,
                 beta1: float = 0.990, beta2: float = 0.999, eps: float = 1e-8,
                 sparse_rows: set[str] | None = None):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.sparse = sparse_rows or set()
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = {p.name: np.zeros(p.data.shape[0], dtype=np.int64)
                  if p.name in self.sparse else 0 for p in self.params}

    def state_bytes(self) -> int:
        return sum(self.m[p.name].nbytes + self.v[p.name].nbytes
                   for p in self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self) -> None:
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                continue
            name = p.name
            if name in self.sparse:
                rows = np.nonzero(
                    g.reshape(g.shape[0], -1).any(axis=1))[0]
                if rows.size == 0:
                    continue
                self.t[name][rows] += 1
                t = self.t[name][rows].reshape((-1,) + (1,) * (g.ndim - 1))
                self.m[name][rows] = (self.beta1 * self.m[name][rows]
                                      + (1 - self.beta1) * g[rows])
                self.v[name][rows] = (self.beta2 * self.v[name][rows]
                                      + (1 - self.beta2) * g[rows] ** 2)
                mhat = self.m[name][rows] / (1 - self.beta1 ** t)
                vhat = self.v[name][rows] / (1 - self.beta2 ** t)
                p.data[rows] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            else:
                self.t[name] += 1
                t = self.t[name]
                self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
                self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g ** 2
                mhat = self.m[name] / (1 - self.beta1 ** t)
                vhat = self.v[name] / (1 - self.beta2 ** t)
                p.data[...] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
