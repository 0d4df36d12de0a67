"""Timing comparison of the numba and numpy kernel backends.

Run directly: ``python benchmarks/bench_kernels.py``. The first numba call
pays JIT compilation; it is excluded via a warm-up pass.
"""

from __future__ import annotations

import time

import numpy as np

from repcl import kernels


def _time(fn, *args, repeats: int = 20) -> float:
    fn(*args)  # warm-up (JIT compile / cache touch)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_pairwise_cosine(rng) -> None:
    print("pairwise_cosine (token-matching scores)")
    for n, d in ((32, 64), (128, 64), (512, 128)):
        a = rng.normal(size=(n, d))
        b = rng.normal(size=(n, d))
        t_active = _time(kernels.pairwise_cosine, a, b)
        t_np = _time(kernels._pairwise_cosine_np, a, b)
        print(f"  n={n:4d} d={d:3d}  {kernels.backend()}: {t_active * 1e6:9.1f} us"
              f"  numpy: {t_np * 1e6:9.1f} us")


def bench_attn_distance(rng) -> None:
    print("attn_distance (attention-map analysis)")
    for g in (4, 8, 14):
        p = g * g
        w = rng.uniform(0.01, 1.0, size=(p, p))
        w /= w.sum(axis=1, keepdims=True)
        coords = np.stack(np.divmod(np.arange(p), g), axis=1)[:, ::-1].astype(float)
        t_active = _time(kernels.attn_distance, w, coords)
        t_np = _time(kernels._attn_distance_np, w, coords)
        print(f"  grid={g:2d} ({p:3d} tokens)  {kernels.backend()}:"
              f" {t_active * 1e6:9.1f} us  numpy: {t_np * 1e6:9.1f} us")


def main() -> None:
    print(f"active backend: {kernels.backend()}")
    rng = np.random.default_rng(0)
    bench_pairwise_cosine(rng)
    bench_attn_distance(rng)


if __name__ == "__main__":
    main()
