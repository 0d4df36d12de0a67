"""Deterministic compute/memory accounting.

Floating ops are counted for matmul only (2*m*k*n per product, forward and
backward alike); that is the cost proxy standing in for iteration time.
Retained bytes track every graph intermediate created between step_reset()
calls — the stand-in for activation memory. Identical config + seed gives
an identical ledger.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

_active: list["Profiler"] = []


def note_flops(n: int) -> None:
    if _active:
        _active[-1].flops += n


def note_retained(nbytes: int) -> None:
    if _active:
        p = _active[-1]
        p.retained_bytes += nbytes
        if p.retained_bytes > p.peak_retained_bytes:
            p.peak_retained_bytes = p.retained_bytes


@dataclass
class LedgerRow:
    phase: str
    task: int
    step: int
    flops: int
    retained_bytes: int


@dataclass
class Profiler:
    flops: int = 0
    retained_bytes: int = 0
    peak_retained_bytes: int = 0
    rows: list[LedgerRow] = field(default_factory=list)

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        popped = _active.pop()
        assert popped is self
        return False

    def step_reset(self) -> None:
        self.flops = 0
        self.retained_bytes = 0

    def commit_step(self, phase: str, task: int, step: int) -> LedgerRow:
        row = LedgerRow(phase, task, step, self.flops, self.retained_bytes)
        self.rows.append(row)
        self.step_reset()
        return row

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows) + self.flops

    def total_macs(self, phase: str | None = None) -> int:
        rows = self.rows if phase is None else [r for r in self.rows if r.phase == phase]
        return sum(r.flops for r in rows) // 2

    def peak_step_bytes(self, phase: str | None = None) -> int:
        rows = self.rows if phase is None else [r for r in self.rows if r.phase == phase]
        return max((r.retained_bytes for r in rows), default=0)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["phase", "task", "step", "flops", "retained_bytes"])
            for r in self.rows:
                w.writerow([r.phase, r.task, r.step, r.flops, r.retained_bytes])
