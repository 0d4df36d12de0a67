"""Prompt pool, surrogate query with frozen random projection, selection,
prepending, and the three-term training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import profiler
from .backbone import TokenBatch, ViT
from .tensor import (Parameter, Tensor, concat, rng_stream, take_rows, tmean,
                     tsqrt, tsum)

MIN_KEY_NORM = 1e-12


@dataclass
class LossWeights:
    eps1: float = 1.0  # key-matching loss coefficient; L2P setting
    eps2: float = 0.0  # reserved auxiliary loss slot, off by default

    def __post_init__(self):
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("loss weights must be nonnegative")


class PromptPool:
    """M learnable prompts of L_p tokens each, with one key vector per prompt."""

    def __init__(self, m: int, prompt_len: int, width: int, seed: int = 0):
        if m < 1:
            raise ValueError("pool must be non-empty")
        rng = rng_stream(seed, "pool-init")
        self.m = m
        self.prompt_len = prompt_len
        self.width = width
        self.prompts = Parameter(
            Tensor(rng.normal(0.0, 0.02, size=(m, prompt_len, width)),
                   requires_grad=True), name="pool.prompts")
        self.keys = Parameter(
            Tensor(rng.normal(0.0, 1.0, size=(m, width)), requires_grad=True),
            name="pool.keys")
        self._key_rng = rng

    def parameters(self) -> list[Parameter]:
        return [self.prompts, self.keys]

    def reinit_degenerate_keys(self) -> None:
        norms = np.linalg.norm(self.keys.data, axis=1)
        for i in np.nonzero(norms < MIN_KEY_NORM)[0]:
            self.keys.data[i] = self._key_rng.normal(0.0, 1.0, size=self.width)


class RandomProjection:
    """Frozen matrix lifting surrogate features (d) to backbone width (D).

    Entries are i.i.d. N(0, 1/d): norm-preserving up to the sqrt(D/d)
    expansion factor. Never receives gradient.
    """

    def __init__(self, d_out: int, d_in: int, seed: int = 0,
                 matrix: np.ndarray | None = None):
        if matrix is not None:
            self.matrix = np.asarray(matrix, dtype=np.float64)
        else:
            rng = rng_stream(seed, "random-projection")
            self.matrix = rng.normal(0.0, d_in ** -0.5, size=(d_out, d_in))
        if self.matrix.shape != (d_out, d_in):
            raise ValueError("projection matrix shape mismatch")

    def __call__(self, q: np.ndarray) -> np.ndarray:
        out = q @ self.matrix.T
        profiler.note_flops(2 * self.matrix.size * (out.size // self.matrix.shape[0]))
        return out


def query_surrogate(images: np.ndarray, surrogate: ViT,
                    projection: RandomProjection) -> np.ndarray:
    """Lifted query q_hat = phi(q_efficient(x)); gradient-free by construction."""
    return projection(surrogate.query_feature(images))


def select_prompt(q_hat: np.ndarray, pool: PromptPool) -> np.ndarray:
    """Argmax cosine similarity against pool keys, per sample.

    All-zero queries (or keys) score 0 against everything; ties break to the
    lowest index, so a zero query always selects prompt 0.
    """
    q = np.atleast_2d(np.asarray(q_hat, dtype=np.float64))
    keys = pool.keys.data
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    kn = np.linalg.norm(keys, axis=1, keepdims=True)
    denom = qn * kn.T
    sims = np.divide(q @ keys.T, denom, out=np.zeros((q.shape[0], pool.m)),
                     where=denom > 0)
    return sims.argmax(axis=1)


def prepend(tokens: TokenBatch, pool: PromptPool, idx: np.ndarray) -> TokenBatch:
    """Insert each sample's selected prompt between CLS and the patch tokens."""
    if tokens.prompt_len != 0:
        raise ValueError("tokens already carry prompts; double prepend is forbidden")
    if pool.prompt_len == 0:
        return tokens
    idx = np.asarray(idx, dtype=np.int64)
    picked = take_rows(pool.prompts.tensor, idx)  # (B, L_p, D)
    x = concat([tokens.x[:, :1, :], picked, tokens.x[:, 1:, :]], axis=1)
    return TokenBatch(x=x, prompt_len=pool.prompt_len)


def _row_cosine(rows: Tensor, q: np.ndarray) -> Tensor:
    """cos(rows_b, q_b) per batch row; q is constant."""
    qt = Tensor(q)
    dot = tsum(rows * qt, axis=1)
    rn = tsqrt(tsum(rows * rows, axis=1))
    qn = np.linalg.norm(q, axis=1)
    return dot / (rn * Tensor(qn) + 1e-30)

def prompt_key_loss(pool: PromptPool, idx: np.ndarray, q_hat: np.ndarray) -> Tensor:
    """Mean (1 - cos) pulling each selected key toward its query.

    Gradient reaches only the selected keys (row gather + scatter-add).
    """
    rows = take_rows(pool.keys.tensor, np.asarray(idx, dtype=np.int64))
    return tmean(1.0 - _row_cosine(rows, np.atleast_2d(q_hat)))


def total_loss(class_loss: Tensor, pool: PromptPool, idx: np.ndarray,
               q_hat: np.ndarray, weights: LossWeights,
               aux_loss: Callable[[], Tensor] | None = None) -> Tensor:
    loss = class_loss
    if weights.eps1 != 0.0:
        loss = loss + weights.eps1 * prompt_key_loss(pool, idx, q_hat)
    if weights.eps2 != 0.0 and aux_loss is not None:
        loss = loss + weights.eps2 * aux_loss()
    return loss
