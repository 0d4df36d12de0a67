"""Autodiff core: forward oracles, backward oracles, broadcasting, graph
behavior under no_grad, and the non-finite guard."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repcl.tensor import (NonFiniteError, Parameter, Tensor, concat,
                          cross_entropy, gelu, layer_norm, matmul, no_grad,
                          permute, reshape, rng_stream, softmax, take_rows,
                          tmean, tsqrt, tsum, transpose_last)


def _t(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def central_diff(f, x, i, eps=1e-6):
    flat = x.data.reshape(-1)
    old = flat[i]
    flat[i] = old + eps
    up = float(f().data)
    flat[i] = old - eps
    dn = float(f().data)
    flat[i] = old
    return (up - dn) / (2 * eps)


# -- forward oracles ------------------------------------------------------


def test_matmul_matches_triple_loop():
    rng = rng_stream(0, "t-mm")
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    # independent oracle: explicit triple loop, no BLAS
    want = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = matmul(_t(a), _t(b)).data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_softmax_matches_exp_normalize():
    rng = rng_stream(0, "t-sm")
    x = rng.normal(size=(4, 7)) * 5
    got = softmax(_t(x)).data
    want = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(got, want, atol=1e-12)
    np.testing.assert_allclose(got.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_is_shift_invariant_and_overflow_safe():
    x = np.array([[1000.0, 1000.0, 999.0]])
    got = softmax(_t(x)).data
    assert np.isfinite(got).all()
    np.testing.assert_allclose(got, softmax(_t(x - 1000.0)).data, atol=1e-12)


def test_layer_norm_two_point_closed_form():
    # for input [1, -1]: mean 0, var 1, so output is ±1/sqrt(1 + eps)
    x = _t([[1.0, -1.0]])
    g = _t(np.ones(2))
    b = _t(np.zeros(2))
    out = layer_norm(x, g, b, eps=1e-5).data
    want = 1.0 / np.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out, [[want, -want]], atol=1e-14)


def test_cross_entropy_uniform_logits_is_log_n():
    logits = _t(np.zeros((2, 4)))
    loss = cross_entropy(logits, np.array([0, 3]))
    np.testing.assert_allclose(loss.data, np.log(4.0), atol=1e-12)


def test_cross_entropy_class_mask_restricts_softmax():
    logits = _t(np.zeros((1, 4)))
    mask = np.array([True, True, False, False])
    loss = cross_entropy(logits, np.array([1]), class_mask=mask)
    np.testing.assert_allclose(loss.data, np.log(2.0), atol=1e-12)


def test_gelu_matches_erf_form():
    x = np.linspace(-4, 4, 41)
    from scipy.special import erf
    want = 0.5 * x * (1 + erf(x / np.sqrt(2)))
    np.testing.assert_allclose(gelu(_t(x)).data, want, atol=1e-12)


def test_concat_take_rows_reshape_roundtrip():
    rng = rng_stream(0, "t-cr")
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    cat = concat([_t(a), _t(b)], axis=0)
    np.testing.assert_array_equal(cat.data, np.vstack([a, b]))
    rows = take_rows(cat, np.array([5, 0]))
    np.testing.assert_array_equal(rows.data, np.vstack([b[3], a[0]]))
    np.testing.assert_array_equal(reshape(rows, (3, 2)).data,
                                  rows.data.reshape(3, 2))


# -- backward oracles -----------------------------------------------------


def test_matmul_backward_against_central_difference():
    rng = rng_stream(1, "t-mmb")
    a = _t(rng.normal(size=(3, 4)))
    b = _t(rng.normal(size=(4, 2)))

    def f():
        return tsum(matmul(a, b) * matmul(a, b))

    out = f()
    out.backward()
    for x in (a, b):
        g = x.grad.reshape(-1).copy()
        for i in range(g.size):
            fd = central_diff(f, x, i)
            assert abs(g[i] - fd) < 1e-6 * max(1.0, abs(fd))


def test_broadcast_add_mul_backward():
    rng = rng_stream(1, "t-bc")
    a = _t(rng.normal(size=(3, 4)))
    b = _t(rng.normal(size=(4,)))  # broadcasts over rows

    def f():
        return tsum((a + b) * b)

    f().backward()
    got = b.grad
    for i in range(4):
        fd = central_diff(f, b, i)
        assert abs(got[i] - fd) < 1e-6


def test_getitem_scatter_backward_accumulates():
    a = _t(np.arange(6.0).reshape(2, 3))
    out = a[0, :] + a[0, :]
    tsum(out).backward()
    np.testing.assert_array_equal(a.grad, [[2, 2, 2], [0, 0, 0]])


def test_take_rows_duplicate_indices_accumulate():
    a = _t(np.ones((3, 2)))
    out = take_rows(a, np.array([1, 1, 1]))
    tsum(out).backward()
    np.testing.assert_array_equal(a.grad, [[0, 0], [3, 3], [0, 0]])


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = rng_stream(2, "t-ceb")
    z = rng.normal(size=(4, 5))
    logits = _t(z.copy())
    y = np.array([1, 0, 4, 2])
    cross_entropy(logits, y).backward()
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(4), y] -= 1.0
    np.testing.assert_allclose(logits.grad, p / 4.0, atol=1e-12)


def test_layer_norm_backward_against_central_difference():
    rng = rng_stream(2, "t-lnb")
    x = _t(rng.normal(size=(2, 5)))
    g = _t(rng.normal(size=5))
    b = _t(rng.normal(size=5))
    w = rng.normal(size=(2, 5))

    def f():
        return tsum(layer_norm(x, g, b) * Tensor(w))

    f().backward()
    for p in (x, g, b):
        flat = p.grad.reshape(-1)
        for i in range(flat.size):
            fd = central_diff(f, p, i)
            assert abs(flat[i] - fd) < 1e-6


def test_permute_transpose_backward():
    rng = rng_stream(3, "t-perm")
    a = _t(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 4, 3))

    def f():
        return tsum(permute(a, (0, 2, 1)) * Tensor(w))

    f().backward()
    np.testing.assert_allclose(a.grad, w.transpose(0, 2, 1), atol=1e-14)
    a.grad[:] = 0
    tsum(transpose_last(a) * Tensor(w)).backward()
    np.testing.assert_allclose(a.grad, w.transpose(0, 2, 1), atol=1e-14)


# -- graph mechanics ------------------------------------------------------


def test_no_grad_builds_no_graph():
    a = _t(np.ones((2, 2)))
    with no_grad():
        out = matmul(a, a) + a
    assert out._parents == ()
    assert not out.requires_grad


def test_diamond_graph_accumulates_once_per_path():
    a = _t([2.0])
    b = a * a        # da = 2a
    c = b + b        # dc/da = 2 * 2a = 8
    tsum(c).backward()
    np.testing.assert_allclose(a.grad, [8.0])


def test_non_finite_forward_raises():
    a = _t([1.0, 0.0])
    b = _t([0.0, 0.0])
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(NonFiniteError):
            a / b


def test_parameter_freeze_stops_gradient():
    p = Parameter(_t(np.ones((2, 2))), name="w")
    p.freeze()
    q = _t(np.ones((2, 2)))
    out = tsum(matmul(p.tensor, q))
    out.backward()
    assert q.grad is not None and q.grad.any()
    assert not p.tensor.requires_grad


# -- deterministic seeded streams ----------------------------------------


def test_rng_streams_are_deterministic_and_distinct():
    a1 = rng_stream(7, "alpha").normal(size=4)
    a2 = rng_stream(7, "alpha").normal(size=4)
    b = rng_stream(7, "beta").normal(size=4)
    c = rng_stream(8, "alpha").normal(size=4)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)


# -- property tests -------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6),
       st.integers(0, 2 ** 31 - 1))
def test_matmul_grad_shapes_match_operands(n, k, m, seed):
    rng = rng_stream(seed, "prop-mm")
    a = _t(rng.normal(size=(n, k)))
    b = _t(rng.normal(size=(k, m)))
    tsum(matmul(a, b)).backward()
    assert a.grad.shape == (n, k)
    assert b.grad.shape == (k, m)
    # d(sum AB)/dA = 1 @ B^T, closed form
    np.testing.assert_allclose(a.grad, np.ones((n, m)) @ b.data.T, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_sum_to_one_and_grad_sums_to_zero(n, seed):
    rng = rng_stream(seed, "prop-sm")
    x = _t(rng.normal(size=(1, n)) * 10)
    w = rng.normal(size=(1, n))
    out = softmax(x)
    np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-12)
    tsum(out * Tensor(w)).backward()
    # softmax Jacobian rows are orthogonal to the all-ones vector
    np.testing.assert_allclose(x.grad.sum(), 0.0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_mean_sqrt_chain_matches_numpy(r, c, seed):
    rng = rng_stream(seed, "prop-ms")
    x = np.abs(rng.normal(size=(r, c))) + 0.5
    out = tmean(tsqrt(_t(x)))
    np.testing.assert_allclose(out.data, np.sqrt(x).mean(), atol=1e-12)
