"""Representation analyzers: mean attention distance and linear CKA."""

from __future__ import annotations

import numpy as np

from . import kernels
from .backbone import AttentionRecord


def grid_coords(g: int) -> np.ndarray:
    ys, xs = np.divmod(np.arange(g * g), g)
    return np.stack([xs, ys], axis=1)


def mean_attention_distance(record: AttentionRecord, grid_side: int,
                            prompt_len: int = 0) -> float:
    """Attention-weighted mean squared grid distance, averaged over queries.

    Only patch tokens participate: CLS and prompt rows/columns are cut out
    and each query row is renormalized by its remaining attention mass. The
    distance is the squared coordinate offset (no square root).
    """
    w = record.weights
    if w.ndim == 2:
        w = w[None]
    protected = 1 + prompt_len
    T = w.shape[-1]
    P = grid_side * grid_side
    if T - protected != P:
        raise ValueError(f"attention size {T} minus protected {protected} "
                         f"!= {grid_side}x{grid_side} grid")
    coords = grid_coords(grid_side)
    sub = w[:, protected:, protected:]
    vals = [kernels.attn_distance(sub[b], coords) for b in range(sub.shape[0])]
    return float(np.mean(vals))


def max_grid_distance(g: int) -> float:
    return 2.0 * (g - 1) ** 2


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between (N, d1) and (N, d2) features."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ValueError("cka needs two feature sets with the same N >= 2")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    xn = np.linalg.norm(xc.T @ xc)
    yn = np.linalg.norm(yc.T @ yc)
    if xn == 0.0 or yn == 0.0:
        raise ValueError("cka undefined for zero-variance input")
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (xn * yn))
