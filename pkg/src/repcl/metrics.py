"""Class-incremental metrics over the lower-triangular accuracy matrix."""

from __future__ import annotations

import numpy as np


class AccuracyMatrix:
    """a[k][j]: accuracy on task j's test set after training task k (j <= k)."""

    def __init__(self, n_tasks: int):
        self.n = n_tasks
        self.a = np.full((n_tasks, n_tasks), np.nan)

    def set(self, after_task: int, on_task: int, acc: float) -> None:
        if on_task > after_task:
            raise ValueError("accuracy matrix is lower-triangular")
        if not 0.0 <= acc <= 1.0:
            raise ValueError("accuracy must be in [0, 1]")
        self.a[after_task, on_task] = acc

    def is_complete(self) -> bool:
        return not np.isnan(self.a[np.tril_indices(self.n)]).any()

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("after_task," + ",".join(f"task{j}" for j in range(self.n)) + "\n")
            for k in range(self.n):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in self.a[k]]
                f.write(f"{k}," + ",".join(cells) + "\n")


def final_average_accuracy(m: AccuracyMatrix) -> float:
    if not m.is_complete():
        raise ValueError("accuracy matrix incomplete")
    return float(m.a[m.n - 1, : m.n].mean())


def forgetting(m: AccuracyMatrix) -> float:
    """Mean over old tasks of (best historical accuracy - final accuracy).

    Raw differences: backward transfer contributes negatively; no clamping.
    """
    if m.n < 2:
        raise ValueError("forgetting undefined for fewer than 2 tasks")
    if not m.is_complete():
        raise ValueError("accuracy matrix incomplete")
    total = 0.0
    for j in range(m.n - 1):
        best = m.a[j: m.n - 1, j].max()
        total += best - m.a[m.n - 1, j]
    return float(total / (m.n - 1))
