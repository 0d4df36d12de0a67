"""Hot inner-loop kernels: numba @njit with a pure-numpy fallback.

Backend selection: set REPCL_BACKEND=numpy to force the fallback (e.g. to
skip JIT warm-up in short-lived processes); anything else, or unset, uses
numba when importable. Dense linear algebra stays on BLAS via np.matmul —
these kernels cover the loopy parts: pairwise-cosine scoring for token
matching and attention-distance accumulation.
"""

from __future__ import annotations

import os

import numpy as np

_want = os.environ.get("REPCL_BACKEND", "numba").lower()
if _want not in ("numba", "numpy"):
    raise ValueError(f"REPCL_BACKEND must be 'numba' or 'numpy', got {_want!r}")

if _want == "numba":
    try:
        from numba import njit
        HAS_NUMBA = True
    except ImportError:  # pragma: no cover
        HAS_NUMBA = False
else:
    HAS_NUMBA = False


def _pairwise_cosine_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    denom = np.maximum(na[:, None] * nb[None, :], 1e-300)
    return (a @ b.T) / denom


def _attn_distance_np(weights: np.ndarray, coords: np.ndarray) -> float:
    # weights: (P, P) attention restricted to patch rows/cols; coords: (P, 2)
    dx = coords[:, 0][:, None] - coords[:, 0][None, :]
    dy = coords[:, 1][:, None] - coords[:, 1][None, :]
    d2 = (dx * dx + dy * dy).astype(np.float64)
    wsum = weights.sum(axis=1)
    per_query = (weights * d2).sum(axis=1) / wsum
    return float(per_query.mean())


if HAS_NUMBA:

    @njit(cache=True)
    def _pairwise_cosine_nb(a, b):  # pragma: no cover - exercised via dispatch
        na_, nb_ = a.shape[0], b.shape[0]
        d = a.shape[1]
        out = np.empty((na_, nb_))
        norm_a = np.empty(na_)
        norm_b = np.empty(nb_)
        for i in range(na_):
            s = 0.0
            for k in range(d):
                s += a[i, k] * a[i, k]
            norm_a[i] = np.sqrt(s)
        for j in range(nb_):
            s = 0.0
            for k in range(d):
                s += b[j, k] * b[j, k]
            norm_b[j] = np.sqrt(s)
        for i in range(na_):
            for j in range(nb_):
                s = 0.0
                for k in range(d):
                    s += a[i, k] * b[j, k]
                denom = norm_a[i] * norm_b[j]
                if denom < 1e-300:
                    denom = 1e-300
                out[i, j] = s / denom
        return out

    @njit(cache=True)
    def _attn_distance_nb(weights, coords):  # pragma: no cover
        p = weights.shape[0]
        acc = 0.0
        for q in range(p):
            num = 0.0
            den = 0.0
            for i in range(p):
                dx = coords[i, 0] - coords[q, 0]
                dy = coords[i, 1] - coords[q, 1]
                w = weights[q, i]
                num += w * (dx * dx + dy * dy)
                den += w
            acc += num / den
        return acc / p

    def pairwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _pairwise_cosine_nb(np.ascontiguousarray(a), np.ascontiguousarray(b))

    def attn_distance(weights: np.ndarray, coords: np.ndarray) -> float:
        return float(_attn_distance_nb(np.ascontiguousarray(weights),
                                       np.ascontiguousarray(coords.astype(np.float64))))

else:
    pairwise_cosine = _pairwise_cosine_np

    def attn_distance(weights: np.ndarray, coords: np.ndarray) -> float:
        return _attn_distance_np(weights, coords.astype(np.float64))


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
