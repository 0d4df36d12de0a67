"""Adaptive layer dropping: Bernoulli keep gates whose probability decays
over steps within a task and tightens on heavily merged layers."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class DropSchedule:
    theta_bar: float = 0.5   # keep-probability floor
    gamma: float = 0.0       # per-step decay rate
    alpha: float = 0.9       # adjustment for heavily merged layers
    tau: int = 4             # merged-token threshold triggering alpha

    def __post_init__(self):
        if not 0 < self.theta_bar <= 1:
            raise ValueError("theta_bar must be in (0, 1]")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.gamma < 0 or self.tau < 0:
            raise ValueError("gamma and tau must be nonnegative")


def alpha_factor(merged_count: int, sched: DropSchedule) -> float:
    # the >= reading of the threshold; the pseudocode's strict > is not used
    return sched.alpha if merged_count >= sched.tau else 1.0


def keep_probability(t: int, sched: DropSchedule, merged_count: int = 0) -> float:
    """Keep probability at step t given last step's merge feedback."""
    decay = (1.0 - sched.theta_bar) * math.exp(-sched.gamma * t) + sched.theta_bar
    return alpha_factor(merged_count, sched) * decay


def defaults_for(size_class: str) -> tuple[float, int]:
    """(alpha, tau) per backbone size class; desk tau is scaled down to the
    desk token budget (16 eligible patch tokens)."""
    table = {"large": (0.9, 16), "base": (0.9, 12), "tiny": (0.9, 8),
             "desk": (0.9, 4)}
    if size_class not in table:
        raise ValueError(f"unknown backbone size class {size_class!r}")
    return table[size_class]


@dataclass
class GateRow:
    step: int
    layer: int
    theta: float
    kept: bool


@dataclass
class GateTrace:
    rows: list[GateRow] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "layer", "theta", "kept"])
            for r in self.rows:
                w.writerow([r.step, r.layer, repr(float(r.theta)), int(r.kept)])


class AldState:
    """Per-run gate state: step counter, previous-step merge feedback, and
    the dedicated RNG stream so gate draws never perturb other streams."""

    def __init__(self, sched: DropSchedule, depth: int, rng: np.random.Generator,
                 trace: GateTrace | None = None):
        self.sched = sched
        self.depth = depth
        self.rng = rng
        self.trace = trace
        self.t = 0
        self.prev_merged = np.zeros(depth, dtype=np.int64)

    def reset_task(self) -> None:
        # every task starts with no dropping: theta_{0,l} = 1
        self.t = 0
        self.prev_merged[:] = 0

    def thetas(self) -> np.ndarray:
        return np.array([keep_probability(self.t, self.sched, int(m))
                         for m in self.prev_merged])

    def draw_gates(self) -> np.ndarray:
        """One training step's keep decisions; advances the step counter."""
        thetas = self.thetas()
        u = self.rng.random(self.depth)
        keep = u < thetas
        if self.trace is not None:
            for layer in range(self.depth):
                self.trace.rows.append(
                    GateRow(self.t, layer, thetas[layer], bool(keep[layer])))
        self.t += 1
        return keep

    def observe_merges(self, merged_counts: np.ndarray) -> None:
        self.prev_merged = np.asarray(merged_counts, dtype=np.int64).copy()
