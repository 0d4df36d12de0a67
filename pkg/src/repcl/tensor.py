"""Dense float64 tensors with a reverse-mode tape.

The op vocabulary is deliberately closed: exactly what a small pre-norm
transformer with prompts needs (matmul, softmax, layer norm, GELU,
cross-entropy, plus glue like concat / row gathers). Every forward op
checks its output for NaN/Inf and aborts the step instead of propagating.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import profiler

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf on finite inputs."""


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


_grad_enabled = True


class no_grad:
    """Context manager disabling tape construction (and activation retention)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None,
                 _check: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor of shape {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        if _parents:
            # graph intermediates retain their buffers until backward; that is
            # exactly the "activation memory" the profiler accounts for
            profiler.note_retained(self.data.nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- basic arithmetic ----------------------------------------------------

    def __add__(self, other):
        return _binary(self, _wrap(other), np.add, _bcast_back_add)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, _wrap(other), np.subtract, _bcast_back_sub)

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        return _binary(self, _wrap(other), np.multiply, _bcast_back_mul)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, _wrap(other), np.divide, _bcast_back_div)

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(out_data, parents, backward) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad or p._parents for p in parents)
    if needs:
        return Tensor(out_data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward)
    return Tensor(out_data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bcast_back_add(a, b, out, g):
    if a.requires_grad or a._parents:
        a._accumulate(_unbroadcast(g, a.data.shape))
    if b.requires_grad or b._parents:
        b._accumulate(_unbroadcast(g, b.data.shape))


def _bcast_back_sub(a, b, out, g):
    if a.requires_grad or a._parents:
        a._accumulate(_unbroadcast(g, a.data.shape))
    if b.requires_grad or b._parents:
        b._accumulate(_unbroadcast(-g, b.data.shape))


def _bcast_back_mul(a, b, out, g):
    if a.requires_grad or a._parents:
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
    if b.requires_grad or b._parents:
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))


def _bcast_back_div(a, b, out, g):
    if a.requires_grad or a._parents:
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
    if b.requires_grad or b._parents:
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))


def _binary(a: Tensor, b: Tensor, fn, back) -> Tensor:
    out_data = fn(a.data, b.data)
    holder = [None]

    def _backward(g):
        back(a, b, holder[0], g)

    out = _make(out_data, (a, b), _backward)
    holder[0] = out
    return out


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor, counted: bool = True) -> Tensor:
    """Matrix product; batched on leading dims of either operand.

    Records 2*m*k*n floating ops with the active profiler (forward and each
    backward product) unless ``counted`` is False — bookkeeping combinations
    such as token-merge mixing matrices pass counted=False.
    """
    a = _wrap(a)
    b = _wrap(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    k = a.data.shape[-1]
    out_data = np.matmul(a.data, b.data)
    if counted:
        profiler.note_flops(2 * k * out_data.size)

    def _backward(g):
        if a.requires_grad or a._parents:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if counted:
                profiler.note_flops(2 * b.data.shape[-1] * ga.size)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if counted:
                profiler.note_flops(2 * a.data.shape[-2] * gb.size)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), _backward)


def transpose_last(a: Tensor) -> Tensor:
    out_data = np.swapaxes(a.data, -1, -2)

    def _backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _make(out_data, (a,), _backward)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def _backward(g):
        a._accumulate(np.transpose(g, inv))

    return _make(out_data, (a,), _backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def _backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), _backward)


def _getitem(a: Tensor, key) -> Tensor:
    out_data = a.data[key]

    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accumulate(full)

    return _make(np.array(out_data, copy=True), (a,), _backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad or t._parents:
                t._accumulate(piece)

    return _make(out_data, tuple(tensors), _backward)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 0 with integer indices; backward scatter-adds."""
    idx = np.asarray(idx)
    out_data = a.data[idx]

    def _backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _make(np.array(out_data, copy=True), (a,), _backward)


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), _backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def tsqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def _backward(g):
        a._accumulate(g * 0.5 / np.sqrt(a.data))

    return _make(out_data, (a,), _backward)


# -- neural ops --------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _make(out_data, (a,), _backward)


def gelu(a: Tensor) -> Tensor:
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * phi

    def _backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        a._accumulate(g * (phi + a.data * pdf))

    return _make(out_data, (a,), _backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    if eps <= 0:
        raise ShapeError("layer_norm eps must be > 0")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data
    n = a.data.shape[-1]

    def _backward(g):
        if a.requires_grad or a._parents:
            gx = g * gain.data
            dot = (gx * xhat).sum(axis=-1, keepdims=True)
            s = gx.sum(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - s / n - xhat * dot / n))
        if gain.requires_grad or gain._parents:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad or bias._parents:
            bias._accumulate(_unbroadcast(g, bias.data.shape))

    return _make(out_data, (a, gain, bias), _backward)


def cross_entropy(logits: Tensor, labels: np.ndarray,
                  class_mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-softmax of the true class over a (B, C) batch.

    class_mask, when given, is a boolean (C,) vector; masked-out classes are
    excluded from the softmax (standard per-task masking for CIL training).
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.data.shape
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels out of range [0, {C})")
    z = logits.data
    if class_mask is not None:
        z = np.where(class_mask[None, :], z, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    logp = (z - zmax) - np.log(denom)
    out_data = -logp[np.arange(B), labels].mean()

    def _backward(g):
        grad = p.copy()
        grad[np.arange(B), labels] -= 1.0
        logits._accumulate(g * grad / B)

    return _make(out_data, (logits,), _backward)


# -- parameters and RNG ------------------------------------------------------


@dataclass
class Parameter:
    tensor: Tensor
    name: str
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable

    def freeze(self) -> None:
        self.trainable = False
        self.tensor.requires_grad = False
        self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


_MASK64 = (1 << 64) - 1


def rng_stream(seed: int, stream_id: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream label).

    Identical (seed, stream_id, draw index) gives identical values across
    runs and platforms; distinct labels give statistically independent
    streams, so e.g. layer-gate draws never perturb data-order draws.
    """
    h = int.from_bytes(hashlib.sha256(stream_id.encode()).digest()[:8], "little")
    key = ((seed & _MASK64) << 64) | h
    return np.random.Generator(np.random.Philox(key=key))
