"""Cost ledger semantics and the sparse-row Adam update."""

import numpy as np
import pytest

from repcl import profiler
from repcl.optim import Adam
from repcl.tensor import (Parameter, Tensor, matmul, no_grad, rng_stream,
                          take_rows, tsum)


def test_matmul_flops_are_2_k_out_size_forward_and_backward():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((4, 5)), requires_grad=True)
    prof = profiler.Profiler()
    with prof:
        prof.step_reset()
        out = matmul(a, b)
        fwd = prof.commit_step("train", 0, 0).flops
        prof.step_reset()
        tsum(out).backward()
        bwd = prof.commit_step("train", 0, 1).flops
    assert fwd == 2 * 4 * 15
    # dA = G @ B^T (2*5*12) and dB = A^T @ G (2*3*20)
    assert bwd == 2 * 5 * 12 + 2 * 3 * 20


def test_frozen_operand_skips_its_gradient_product():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    w = Tensor(np.ones((4, 5)), requires_grad=False)  # frozen weight
    prof = profiler.Profiler()
    with prof:
        prof.step_reset()
        out = matmul(a, w)
        prof.commit_step("train", 0, 0)
        prof.step_reset()
        tsum(out).backward()
        bwd = prof.commit_step("train", 0, 1).flops
    assert bwd == 2 * 5 * 12  # only dA is computed


def test_uncounted_matmul_charges_nothing():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    prof = profiler.Profiler()
    with prof:
        prof.step_reset()
        matmul(a, a, counted=False)
        assert prof.commit_step("train", 0, 0).flops == 0


def test_retained_bytes_track_graph_intermediates_only():
    a = Tensor(np.ones((4, 4)), requires_grad=True)
    prof = profiler.Profiler()
    with prof:
        prof.step_reset()
        _ = a + a  # one graph intermediate: 16 float64
        graph_bytes = prof.commit_step("train", 0, 0).retained_bytes
        prof.step_reset()
        with no_grad():
            _ = a + a
        nograd_bytes = prof.commit_step("eval", 0, 0).retained_bytes
    assert graph_bytes == 16 * 8
    assert nograd_bytes == 0


def test_profiler_phase_totals_and_peak():
    prof = profiler.Profiler()
    with prof:
        prof.step_reset()
        profiler.note_flops(100)
        profiler.note_retained(64)
        prof.commit_step("train", 0, 0)
        prof.step_reset()
        profiler.note_flops(300)
        profiler.note_retained(32)
        prof.commit_step("train", 0, 1)
        prof.step_reset()
        profiler.note_flops(50)
        prof.commit_step("eval", 0, 0)
    assert prof.total_macs("train") == 200
    assert prof.total_macs() == 225
    assert prof.peak_step_bytes("train") == 64


def test_profiler_csv(tmp_path):
    prof = profiler.Profiler()
    with prof:
        prof.step_reset()
        profiler.note_flops(10)
        prof.commit_step("train", 2, 7)
    p = tmp_path / "ledger.csv"
    prof.write_csv(p)
    lines = p.read_text().strip().splitlines()
    assert lines[0] == "phase,task,step,flops,retained_bytes"
    assert lines[1] == "train,2,7,10,0"


def test_nested_profilers_do_not_cross_talk():
    outer = profiler.Profiler()
    inner = profiler.Profiler()
    with outer:
        outer.step_reset()
        with inner:
            inner.step_reset()
            profiler.note_flops(5)
            inner.commit_step("train", 0, 0)
        outer.commit_step("train", 0, 0)
    assert inner.total_flops == 5
    assert outer.total_flops == 0


# -- Adam -----------------------------------------------------------------


def _quad_param(name, n=4):
    rng = rng_stream(0, f"adam-{name}")
    return Parameter(Tensor(rng.normal(size=(n,)), requires_grad=True),
                     name=name)


def test_adam_first_step_is_lr_sized():
    # with m_hat/sqrt(v_hat) = sign(g) at t=1, the first update is ~lr
    p = _quad_param("p")
    start = p.data.copy()
    opt = Adam([p], lr=0.01)
    p.tensor.grad = np.array([1.0, -2.0, 3.0, -4.0])
    opt.step()
    np.testing.assert_allclose(start - p.data, 0.01 * np.sign([1, -2, 3, -4]),
                               rtol=1e-6)


def test_adam_converges_on_quadratic():
    p = _quad_param("q")
    # beta1 below the package default: the quadratic needs less momentum
    # smoothing than a noisy training loop, and converges much faster.
    opt = Adam([p], lr=0.05, beta1=0.9)
    for _ in range(400):
        opt.zero_grad()
        loss = tsum(p.tensor * p.tensor)
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-3


def test_sparse_rows_untouched_rows_are_bit_identical():
    rng = rng_stream(1, "sparse")
    p = Parameter(Tensor(rng.normal(size=(6, 3)), requires_grad=True),
                  name="pool.keys")
    before = p.data.copy()
    opt = Adam([p], lr=0.1, sparse_rows={"pool.keys"})
    for _ in range(5):
        opt.zero_grad()
        rows = take_rows(p.tensor, np.array([1, 4]))
        tsum(rows * rows).backward()
        opt.step()
    touched = [1, 4]
    untouched = [0, 2, 3, 5]
    assert (p.data[untouched] == before[untouched]).all()
    assert (p.data[touched] != before[touched]).any()


def test_sparse_rows_match_dense_adam_on_always_active_rows():
    """A row updated at every step must follow the dense trajectory: per-row
    timesteps make sparse Adam equivalent to running dense Adam on that row
    alone.  Fancy indexing reorders the float ops, so allow a few ULP."""
    rng = rng_stream(2, "sparse-eq")
    w0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(7)]

    dense = Parameter(Tensor(w0.copy(), requires_grad=True), name="d")
    sparse = Parameter(Tensor(w0.copy(), requires_grad=True), name="s")
    od = Adam([dense], lr=0.02)
    os_ = Adam([sparse], lr=0.02, sparse_rows={"s"})
    for g in grads:
        dense.tensor.grad = g.copy()
        sparse.tensor.grad = g.copy()
        od.step()
        os_.step()
    np.testing.assert_allclose(dense.data, sparse.data, rtol=0, atol=1e-12)


def test_state_bytes_counts_both_moments():
    p = _quad_param("b", n=10)
    opt = Adam([p])
    assert opt.state_bytes() == 2 * 10 * 8
