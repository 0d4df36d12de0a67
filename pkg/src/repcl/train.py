"""The continual-learning loop: select -> prepend -> merged/gated forward ->
three-term loss -> sparse update, plus pretraining and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import profiler
from .ald import AldState, DropSchedule, GateTrace
from .atom import AtomHooks, MergeReport
from .backbone import ViT, ViTConfig
from .config import RunConfig
from .data import (PRETRAIN_CLASS_OFFSET, TaskStream, batches,
                   gen_synthetic_stream)
from .metrics import AccuracyMatrix, final_average_accuracy, forgetting
from .optim import Adam
from .prompting import (LossWeights, PromptPool, RandomProjection,
                        prepend, query_surrogate, select_prompt, total_loss)
from .tensor import (NonFiniteError, Parameter, Tensor, cross_entropy,
                     no_grad, rng_stream)

log = logging.getLogger("repcl")


class TrainingAborted(RuntimeError):
    """Raised when a step produces non-finite values."""


@dataclass
class StepRow:
    task: int
    step: int
    loss: float
    acc: float


def pretrain_backbones(cfg: RunConfig):
    """Seeded pretraining on a held-out synthetic distribution; both models
    come back with frozen backbones (the desk stand-in for ImageNet weights)."""
    main = ViT(ViTConfig(**{**cfg.backbone.to_dict(),
                            "n_classes": cfg.pretrain.classes}),
               seed=cfg.seed, init_stream="init-main")
    surrogate = ViT(ViTConfig(**{**cfg.surrogate.to_dict(),
                                 "n_classes": cfg.pretrain.classes}),
                    seed=cfg.seed, init_stream="init-surrogate")
    stream = gen_synthetic_stream(
        1, cfg.pretrain.classes, cfg.pretrain.samples_per_class, cfg.seed,
        image_side=cfg.backbone.image_side, noise=cfg.pretrain.noise,
        class_offset=PRETRAIN_CLASS_OFFSET)
    x, y = stream.tasks[0].train_x, stream.tasks[0].train_y
    for name, model in (("main", main), ("surrogate", surrogate)):
        _fit_supervised(model, x, y, cfg.pretrain.iters, cfg.budget.batch_size,
                        cfg.pretrain.lr, rng_stream(cfg.seed, f"pretrain-{name}"))
        model.freeze_backbone()
        log.info("pretrained %s backbone (%d iters)", name, cfg.pretrain.iters)
    return main, surrogate


def _fit_supervised(model: ViT, x, y, iters, batch_size, lr, rng) -> None:
    opt = Adam(model.parameters(), lr=lr, beta1=0.9, beta2=0.999)
    for bx, by in batches(x, y, batch_size, iters, rng):
        tokens = model.embed(bx)
        logits, _, _ = model.forward_tokens(tokens)
        loss = cross_entropy(logits, by)
        opt.zero_grad()
        loss.backward()
        opt.step()


class Trainer:
    """Owns all mutable CL state for one run: pool, head, projection,
    optimizer, drop/merge schedules, and the cost ledger."""

    def __init__(self, cfg: RunConfig, main: ViT, surrogate: ViT,
                 prof: profiler.Profiler | None = None):
        self.cfg = cfg
        self.main = main
        self.surrogate = surrogate
        self.prof = prof if prof is not None else profiler.Profiler()
        D = cfg.backbone.width
        # fresh class-incremental head; the pretrain head is discarded
        main.w_head = Parameter(Tensor(np.zeros((D, cfg.n_classes)),
                                       requires_grad=True), name="w_head")
        main.b_head = Parameter(Tensor(np.zeros(cfg.n_classes),
                                       requires_grad=True), name="b_head")
        self.pool = PromptPool(cfg.pool.size, cfg.pool.prompt_len, D,
                               seed=cfg.seed)
        self.phi = RandomProjection(D, cfg.surrogate.width, seed=cfg.seed)
        self.weights = LossWeights(cfg.loss.eps1, cfg.loss.eps2)
        self.opt = Adam(self.pool.parameters() + [main.w_head, main.b_head],
                        lr=cfg.budget.lr,
                        sparse_rows={"pool.prompts", "pool.keys"})
        depth = cfg.backbone.depth
        if cfg.atom.enabled:
            from .atom import MergeSchedule
            sched = MergeSchedule(cfg.atom.effective_r_max(), max(depth, 1))
            self.targets = [sched.schedule_r(l + 1) for l in range(depth)]
        else:
            self.targets = [0] * depth
        self.gate_trace = GateTrace()
        if cfg.ald.enabled:
            dsched = DropSchedule(cfg.ald.theta_bar,
                                  cfg.ald.effective_gamma(cfg.budget.iters_per_task),
                                  cfg.ald.alpha, cfg.ald.tau)
            self.ald = AldState(dsched, depth, rng_stream(cfg.seed, "ald-gate"),
                                trace=self.gate_trace)
        else:
            self.ald = None
        self.last_report = MergeReport()
        self.rows: list[StepRow] = []
        self.acc_matrix = AccuracyMatrix(cfg.stream.n_tasks)
        self._init_keys_from_pretrain()

    def _init_keys_from_pretrain(self) -> None:
        """Anchor the pool keys on the query manifold before any CL data is
        seen: class-mean query features of evenly spaced pretraining classes,
        unit-normalized. Random keys make the cosine selection of the first
        tasks essentially arbitrary; on-manifold keys let distinct tasks bind
        to distinct prompts from the start. Uses only pretraining data."""
        cfg = self.cfg
        per_class = 8
        stream = gen_synthetic_stream(
            1, cfg.pretrain.classes, per_class, cfg.seed,
            image_side=cfg.backbone.image_side, noise=cfg.pretrain.noise,
            test_samples_per_class=1, class_offset=PRETRAIN_CLASS_OFFSET)
        x, y = stream.train_data(0)
        q = self.query(x)
        means = np.stack([q[y == c].mean(axis=0)
                          for c in range(cfg.pretrain.classes)])
        idx = np.linspace(0, cfg.pretrain.classes - 1,
                          self.pool.m).round().astype(int)
        picked = means[idx]
        norms = np.linalg.norm(picked, axis=1, keepdims=True)
        self.pool.keys.data[:] = picked / np.maximum(norms, 1e-12)

    # -- queries ---------------------------------------------------------

    def query(self, images: np.ndarray) -> np.ndarray:
        if self.cfg.surrogate_selection.enabled:
            return query_surrogate(images, self.surrogate, self.phi)
        return self.main.query_feature(images)

    # -- training ----------------------------------------------------------

    def train_task(self, stream: TaskStream, task_index: int) -> None:
        cfg = self.cfg
        # standard CIL masking: the softmax during training covers only the
        # current task's label range
        mask = np.zeros(cfg.n_classes, dtype=bool)
        lo = task_index * cfg.stream.classes_per_task
        mask[lo: lo + cfg.stream.classes_per_task] = True
        if self.ald is not None:
            self.ald.reset_task()
        x, y = stream.train_data(task_index)
        rng = rng_stream(cfg.seed, f"batches-task{task_index}")
        with self.prof:
            self.prof.step_reset()
            for step, (bx, by) in enumerate(
                    batches(x, y, cfg.budget.batch_size, cfg.budget.iters_per_task,
                            rng)):
                try:
                    loss, acc = self._train_step(bx, by, mask)
                except NonFiniteError as e:
                    raise TrainingAborted(
                        f"non-finite value at task {task_index} step {step}: {e}"
                    ) from e
                self.prof.commit_step("train", task_index, step)
                self.rows.append(StepRow(task_index, step, loss, acc))
        for j in range(task_index + 1):
            self.acc_matrix.set(task_index, j, self.evaluate(stream, j))

    def _train_step(self, bx, by, mask) -> tuple[float, float]:
        q_hat = self.query(bx)
        idx = select_prompt(q_hat, self.pool)
        tokens = prepend(self.main.embed(bx), self.pool, idx)
        hooks = self._make_hooks(tokens.x.shape[0], tokens.n_tokens,
                                 training=True)
        logits, _, _ = self.main.forward_tokens(tokens, hooks)
        class_loss = cross_entropy(logits, by, class_mask=mask)
        loss = total_loss(class_loss, self.pool, idx, q_hat, self.weights)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.pool.reinit_degenerate_keys()
        self.last_report = hooks.report
        self.last_logits = logits.data.copy()
        if self.ald is not None:
            self.ald.observe_merges(
                hooks.report.merged_counts(self.cfg.backbone.depth))
        acc = float((logits.data.argmax(axis=1) == by).mean())
        return loss.item(), acc

    def _make_hooks(self, batch: int, n_tokens: int, training: bool) -> AtomHooks:
        gate_fn = None
        if training and self.ald is not None:
            keeps = self.ald.draw_gates()
            gate_fn = lambda layer: bool(keeps[layer])  # noqa: E731
        targets = self.targets if training else [0] * self.cfg.backbone.depth
        return AtomHooks(targets, batch, n_tokens, gate_fn=gate_fn)

    # -- evaluation --------------------------------------------------------

    def evaluate(self, stream: TaskStream, task_index: int,
                 batch_size: int = 64) -> float:
        """Clean deterministic forward: gates forced on, no merging."""
        x, y = stream.test_data(task_index)
        correct = 0
        with self.prof:
            self.prof.step_reset()
            with no_grad():
                for start in range(0, len(y), batch_size):
                    bx, by = x[start:start + batch_size], y[start:start + batch_size]
                    q_hat = self.query(bx)
                    idx = select_prompt(q_hat, self.pool)
                    tokens = prepend(self.main.embed(bx), self.pool, idx)
                    logits, _, _ = self.main.forward_tokens(tokens)
                    correct += int((logits.data.argmax(axis=1) == by).sum())
            self.prof.commit_step("eval", task_index, 0)
        return correct / len(y)

    # -- results -----------------------------------------------------------

    def summary(self) -> dict:
        out = {
            "final_avg_acc": final_average_accuracy(self.acc_matrix),
            "total_macs": self.prof.total_macs(),
            "train_macs": self.prof.total_macs("train"),
            "eval_macs": self.prof.total_macs("eval"),
            "peak_bytes": self.prof.peak_step_bytes("train"),
            "param_bytes": sum(p.data.nbytes for p in
                               self.main.parameters() + self.surrogate.parameters()
                               + self.pool.parameters()),
            "optimizer_bytes": self.opt.state_bytes(),
            "frozen_hash": self.main.params_hash_backbone(),
        }
        if self.cfg.stream.n_tasks >= 2:
            out["forgetting"] = forgetting(self.acc_matrix)
        return out


def run_stream(cfg: RunConfig, main: ViT, surrogate: ViT,
               stream: TaskStream | None = None) -> tuple[Trainer, dict]:
    if stream is None:
        stream = gen_synthetic_stream(
            cfg.stream.n_tasks, cfg.stream.classes_per_task,
            cfg.stream.samples_per_class, cfg.seed,
            image_side=cfg.backbone.image_side, noise=cfg.stream.noise,
            test_samples_per_class=cfg.stream.test_samples_per_class)
    trainer = Trainer(cfg, main, surrogate)
    for j in range(cfg.stream.n_tasks):
        trainer.train_task(stream, j)
        log.info("task %d done: acc row %s", j,
                 np.round(trainer.acc_matrix.a[j, : j + 1], 3))
        if stream.old_task_train_reads(j):
            raise TrainingAborted("rehearsal-free contract violated: "
                                  "trainer read old-task training data")
        stream.access_log.clear()
    return trainer, trainer.summary()
