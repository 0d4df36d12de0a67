"""Closed-form MAC model of the training step.

Mirrors the profiler's accounting rule (matmul products only, forward and
backward; merge mixing and selection scans are bookkeeping and uncounted).
With layer dropping off the model is exact; with dropping on it computes the
exact expectation by propagating the distribution over keep patterns, whose
merge feedback makes consecutive steps a small Markov chain.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .ald import DropSchedule, keep_probability
from .atom import realized_merges
from .backbone import ViTConfig
from .config import RunConfig


def clean_layer_fwd_flops(B: int, T: int, D: int, r: int) -> int:
    # qkv + scores + attn@v + proj + two mlp matmuls, tokens constant
    return 6 * B * T * D * D + 4 * B * T * T * D + 2 * B * T * D * D \
        + 4 * r * B * T * D * D


def clean_forward_flops(cfg: ViTConfig, B: int, head: bool = True) -> int:
    """Promptless, merge-free forward incl. patch embed (the query path,
    head off, and the evaluation backbone path)."""
    T = cfg.base_tokens
    total = 2 * (cfg.patch_side ** 2) * B * cfg.n_patches * cfg.width
    total += cfg.depth * clean_layer_fwd_flops(B, T, cfg.width, cfg.mlp_ratio)
    if head:
        total += 2 * B * cfg.width * cfg.n_classes
    return total


def _layer_train_flops(B: int, T_att: int, T_mlp: int, D: int, r: int) -> int:
    # forward: qkv 6BTD^2, attention 4BT^2D, proj 2BTD^2, mlp 4rBT'D^2
    # backward: frozen weights skip their own grad products, so qkv/proj/mlp
    # charge 1x forward and the two attention products charge 2x
    fwd = 6 * B * T_att * D * D + 4 * B * T_att * T_att * D \
        + 2 * B * T_att * D * D + 4 * r * B * T_mlp * D * D
    bwd = 6 * B * T_att * D * D + 8 * B * T_att * T_att * D \
        + 2 * B * T_att * D * D + 4 * r * B * T_mlp * D * D
    return fwd + bwd


@dataclass
class PatternCost:
    flops: int
    merged: tuple[int, ...]  # realized merges per layer under this pattern


def pattern_cost(cfg: RunConfig, pattern: tuple[bool, ...],
                 targets: list[int], n_classes: int) -> PatternCost:
    """Exact charged flops of one main forward+backward given keep pattern."""
    bk = cfg.backbone
    B = cfg.budget.batch_size
    D = bk.width
    T = bk.base_tokens + cfg.pool.prompt_len
    protected = 1 + cfg.pool.prompt_len
    flops = 2 * (bk.patch_side ** 2) * B * bk.n_patches * D  # patch embed
    merged = []
    for layer in range(bk.depth):
        if not pattern[layer]:
            merged.append(0)
            continue
        eligible = T - protected
        m = realized_merges(targets[layer], eligible)
        flops += _layer_train_flops(B, T, T - m, D, bk.mlp_ratio)
        T -= m
        merged.append(m)
    # head forward 2BDC, backward 4BDC (both operand grads)
    flops += 6 * B * D * n_classes
    return PatternCost(flops, tuple(merged))


def query_flops(cfg: RunConfig) -> int:
    B = cfg.budget.batch_size
    if cfg.surrogate_selection.enabled:
        f = clean_forward_flops(cfg.surrogate, B, head=False)
        f += 2 * B * cfg.surrogate.width * cfg.backbone.width  # projection lift
        return f
    return clean_forward_flops(cfg.backbone, B, head=False)


def step_flops_fixed(cfg: RunConfig, n_classes: int) -> int:
    """Per-step training flops with every layer kept (layer dropping off)."""
    targets = _targets(cfg)
    pat = tuple([True] * cfg.backbone.depth)
    return query_flops(cfg) + pattern_cost(cfg, pat, targets, n_classes).flops


def _targets(cfg: RunConfig) -> list[int]:
    if not cfg.atom.enabled:
        return [0] * cfg.backbone.depth
    from .atom import MergeSchedule
    sched = MergeSchedule(cfg.atom.effective_r_max(), cfg.backbone.depth)
    return [sched.schedule_r(l + 1) for l in range(cfg.backbone.depth)]


def expected_train_flops(cfg: RunConfig, n_steps: int,
                         n_classes: int | None = None) -> float:
    """Expected charged flops of n_steps training steps of one task.

    The keep pattern at step t is Bernoulli per layer with probabilities a
    function of step index and the previous step's realized merges; merges
    are a deterministic function of the pattern, so the pattern sequence is
    a Markov chain over 2^depth states, propagated exactly.
    """
    n_classes = cfg.n_classes if n_classes is None else n_classes
    q = query_flops(cfg)
    targets = _targets(cfg)
    depth = cfg.backbone.depth
    if not cfg.ald.enabled:
        pat = tuple([True] * depth)
        per = q + pattern_cost(cfg, pat, targets, n_classes).flops
        return float(per) * n_steps
    sched = DropSchedule(cfg.ald.theta_bar,
                         cfg.ald.effective_gamma(cfg.budget.iters_per_task),
                         cfg.ald.alpha, cfg.ald.tau)
    patterns = list(product([True, False], repeat=depth))
    costs = [pattern_cost(cfg, p, targets, n_classes) for p in patterns]
    flop_vec = np.array([c.flops for c in costs], dtype=np.float64)
    merged_mat = np.array([c.merged for c in costs], dtype=np.int64)
    kept_mat = np.array(patterns, dtype=bool)

    # state = previous step's pattern (its merges set this step's feedback);
    # an extra virtual state carries the zero feedback of the first step
    n_pat = len(patterns)
    merged_states = np.vstack([merged_mat, np.zeros((1, depth), dtype=np.int64)])
    state = np.zeros(n_pat + 1, dtype=np.float64)
    state[n_pat] = 1.0

    total = 0.0
    for t in range(n_steps):
        new_state = np.zeros_like(state)
        for s in np.nonzero(state > 0.0)[0]:
            th = np.array([keep_probability(t, sched, int(merged_states[s, l]))
                           for l in range(depth)])
            probs = np.where(kept_mat, th[None, :], 1.0 - th[None, :]).prod(axis=1)
            total += state[s] * float(probs @ flop_vec)
            new_state[:n_pat] += state[s] * probs
        total += q
        state = new_state
    return total


def expected_train_macs(cfg: RunConfig, n_steps: int) -> float:
    return expected_train_flops(cfg, n_steps) / 2.0
