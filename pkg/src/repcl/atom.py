"""Adaptive token merging: depth-progressive schedule over non-protected
tokens, realized by bipartite soft matching with size-weighted means."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .backbone import ForwardHooks, ViT
from .tensor import Tensor, matmul


@dataclass(frozen=True)
class MergeSchedule:
    r_max: int
    depth: int

    def __post_init__(self):
        if self.r_max < 0 or self.depth < 1:
            raise ValueError("r_max must be >= 0 and depth >= 1")

    @property
    def delta(self) -> float:
        return 0.0 if self.depth == 1 else self.r_max / (self.depth - 1)

    def schedule_r(self, layer: int) -> int:
        """Merge target for 1-based layer index: floor(min(delta*(l-1), r_max))."""
        if not 1 <= layer <= self.depth:
            raise ValueError(f"layer {layer} outside [1, {self.depth}]")
        return int(np.floor(min(self.delta * (layer - 1), float(self.r_max))))


def uniform_schedule(n: int, depth: int) -> list[int]:
    """Conventional fixed-rate merging (the ToMe ablation baseline)."""
    return [n] * depth


@dataclass
class MergeRow:
    layer: int
    n_entering: int   # eligible tokens entering the merge
    n_merged: int     # tokens removed at this layer
    n_surviving: int  # eligible tokens left afterwards


@dataclass
class MergeReport:
    rows: list[MergeRow] = field(default_factory=list)

    def clear(self) -> None:
        self.rows.clear()

    def add(self, row: MergeRow) -> None:
        self.rows.append(row)

    def merged_counts(self, depth: int) -> np.ndarray:
        out = np.zeros(depth, dtype=np.int64)
        for r in self.rows:
            out[r.layer] = r.n_merged
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "n_entering", "n_merged", "n_surviving"])
            for r in self.rows:
                w.writerow([r.layer, r.n_entering, r.n_merged, r.n_surviving])


def realized_merges(target: int, eligible: int) -> int:
    """Targets beyond pair availability are clamped (actual count recorded)."""
    return max(0, min(target, eligible // 2))


def merge_layer(x: Tensor, protected: int, n_target: int, sizes: np.ndarray,
                keys_mean: np.ndarray):
    """Merge ``n_target`` eligible tokens via bipartite soft matching.

    Eligible tokens (everything past the protected span) alternate into sets
    A/B; each A token is scored against B by cosine similarity of head-mean
    attention keys, and the top-scoring A tokens fold into their best B match
    by size-weighted mean. Protected tokens pass through untouched. Returns
    (merged tokens, updated sizes, MergeRow with realized counts).
    """
    B, T, D = x.shape
    eligible = T - protected
    n = realized_merges(n_target, eligible)
    if n == 0:
        return x, sizes, (eligible, 0, eligible)

    a_idx = np.arange(protected, T, 2)
    b_idx = np.arange(protected + 1, T, 2)
    # per-sample combination matrices; merge decisions are detached, so the
    # mix is a constant matrix and backward is just its transpose
    T_out = T - n
    W = np.zeros((B, T_out, T))
    new_sizes = np.empty((B, T_out))
    for b in range(B):
        scores = kernels.pairwise_cosine(keys_mean[b][a_idx], keys_mean[b][b_idx])
        best_b = scores.argmax(axis=1)
        best_score = scores[np.arange(len(a_idx)), best_b]
        order = np.argsort(-best_score, kind="stable")
        merged_a = np.sort(order[:n])
        keep_mask = np.ones(T, dtype=bool)
        keep_mask[a_idx[merged_a]] = False
        survivors = np.nonzero(keep_mask)[0]
        sz = sizes[b].copy()
        # accumulate size-weighted sums into each A token's B target
        for ai in merged_a:
            src = a_idx[ai]
            dst = b_idx[best_b[ai]]
            W[b, :, src] = 0.0
            row = np.nonzero(survivors == dst)[0][0]
            W[b, row, src] = sz[src]
            sz[dst] += sz[src]
        for r, t in enumerate(survivors):
            W[b, r, t] = sizes[b][t] if t in b_idx[best_b[merged_a]] else 1.0
        # normalize merged rows to weighted means; untouched rows stay identity
        merged_dsts = set(b_idx[best_b[merged_a]])
        for r, t in enumerate(survivors):
            if t in merged_dsts:
                W[b, r] /= sz[t]
        new_sizes[b] = sz[survivors]
    out = matmul(Tensor(W), x, counted=False)
    return out, new_sizes, (eligible, n, eligible - n)


class AtomHooks(ForwardHooks):
    """Per-step merging state: token sizes, proportional-attention bias, and
    the per-layer merge report consumed by the layer-drop schedule."""

    def __init__(self, targets: list[int], batch: int, n_tokens: int,
                 gate_fn=None):
        self.targets = targets
        self.sizes = np.ones((batch, n_tokens))
        self.report = MergeReport()
        self._gate_fn = gate_fn

    def gate(self, layer: int) -> bool:
        return True if self._gate_fn is None else self._gate_fn(layer)

    def on_skip(self, layer: int, n_tokens: int, protected: int) -> None:
        eligible = n_tokens - protected
        self.report.add(MergeRow(layer, eligible, 0, eligible))

    def attn_bias(self, layer: int, n_tokens: int):
        if np.all(self.sizes == 1.0):
            return None
        return np.log(self.sizes)

    def post_attention(self, layer: int, x: Tensor, keys_mean: np.ndarray,
                       protected: int) -> Tensor:
        x, self.sizes, (n_in, n_merged, n_out) = merge_layer(
            x, protected, self.targets[layer], self.sizes, keys_mean)
        self.report.add(MergeRow(layer, n_in, n_merged, n_out))
        return x


def proportional_attention(scores: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Add log(size) per key so merged tokens keep their aggregate softmax mass."""
    return scores + np.log(sizes)
