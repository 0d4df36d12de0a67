"""Synthetic class-incremental task streams and the REPD1 dataset file.

Each class is a seeded pattern family: a low-frequency sinusoid mixture plus
a Gaussian blob at a class-specific location, rendered to a grayscale grid;
samples add i.i.d. pixel noise. Classes are disjoint across tasks and the
loader audits every access so rehearsal-freedom is checkable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import rng_stream

MAGIC = b"REPD1"

# pretrain classes draw templates from a disjoint id range so the frozen
# backbone never sees the CL classes' patterns
PRETRAIN_CLASS_OFFSET = 1_000_000


def class_template(generator_seed: int, class_id: int, side: int) -> np.ndarray:
    rng = rng_stream(generator_seed, f"class-template-{class_id}")
    yy, xx = np.mgrid[0:side, 0:side] / side
    img = np.zeros((side, side))
    for _ in range(5):
        fx, fy = rng.uniform(0.5, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    for _ in range(2):
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        sigma = rng.uniform(0.06, 0.18)
        sign = rng.choice([-1.0, 1.0])
        img += sign * 2.2 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2)
                                   / (2 * sigma ** 2))
    lo, hi = img.min(), img.max()
    return 0.1 + 0.8 * (img - lo) / (hi - lo)


def render_samples(generator_seed: int, class_id: int, n: int, side: int,
                   noise: float, split: str) -> np.ndarray:
    template = class_template(generator_seed, class_id, side)
    rng = rng_stream(generator_seed, f"class-samples-{class_id}-{split}")
    x = template[None] + noise * rng.standard_normal((n, side, side))
    return np.clip(x, 0.0, 1.0)


@dataclass
class Task:
    index: int
    classes: list[int]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class TaskStream:
    tasks: list[Task]
    generator_seed: int
    image_side: int
    access_log: list[tuple[str, int]] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return sum(len(t.classes) for t in self.tasks)

    def train_data(self, task_index: int):
        self.access_log.append(("train", task_index))
        t = self.tasks[task_index]
        return t.train_x, t.train_y

    def test_data(self, task_index: int):
        self.access_log.append(("test", task_index))
        t = self.tasks[task_index]
        return t.test_x, t.test_y

    def old_task_train_reads(self, current: int) -> list[tuple[str, int]]:
        return [a for a in self.access_log if a[0] == "train" and a[1] != current]


def gen_synthetic_stream(n_tasks: int, classes_per_task: int,
                         samples_per_class: int, seed: int,
                         image_side: int = 32, noise: float = 0.08,
                         test_samples_per_class: int | None = None,
                         class_offset: int = 0) -> TaskStream:
    if min(n_tasks, classes_per_task, samples_per_class) < 1:
        raise ValueError("stream parameters must be positive")
    n_test = test_samples_per_class or max(1, samples_per_class // 4)
    tasks = []
    for j in range(n_tasks):
        classes = [class_offset + j * classes_per_task + c
                   for c in range(classes_per_task)]
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for label, cid in zip(range(j * classes_per_task,
                                    (j + 1) * classes_per_task), classes):
            tr_x.append(render_samples(seed, cid, samples_per_class, image_side,
                                       noise, "train"))
            tr_y.append(np.full(samples_per_class, label, dtype=np.int64))
            te_x.append(render_samples(seed, cid, n_test, image_side, noise, "test"))
            te_y.append(np.full(n_test, label, dtype=np.int64))
        # deterministic shuffle of the within-task sample order
        rng = rng_stream(seed, f"task-order-{j}")
        x = np.concatenate(tr_x)
        y = np.concatenate(tr_y)
        perm = rng.permutation(len(y))
        tasks.append(Task(j, classes, x[perm], y[perm],
                          np.concatenate(te_x), np.concatenate(te_y)))
    return TaskStream(tasks=tasks, generator_seed=seed, image_side=image_side)


def batches(x: np.ndarray, y: np.ndarray, batch_size: int, n_iters: int,
            rng: np.random.Generator):
    """Yields n_iters minibatches sampled with replacement, seeded."""
    for _ in range(n_iters):
        idx = rng.integers(0, len(y), size=batch_size)
        yield x[idx], y[idx]


# -- REPD1 binary import/export ----------------------------------------------


def save_dataset(path, x: np.ndarray, y: np.ndarray) -> None:
    """u8-quantized samples: magic, u32 count, u32 side, then per sample a
    u8 pixel grid and a u16 label."""
    n, side, _ = x.shape
    pix = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", n, side))
        for i in range(n):
            f.write(pix[i].tobytes())
            f.write(struct.pack("<H", int(y[i])))


def load_dataset(path):
    with open(path, "rb") as f:
        if f.read(5) != MAGIC:
            raise ValueError("not a REPD1 dataset file")
        n, side = struct.unpack("<II", f.read(8))
        x = np.empty((n, side, side))
        y = np.empty(n, dtype=np.int64)
        for i in range(n):
            raw = f.read(side * side)
            x[i] = np.frombuffer(raw, dtype=np.uint8).reshape(side, side) / 255.0
            (y[i],) = struct.unpack("<H", f.read(2))
    return x, y
