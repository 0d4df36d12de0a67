"""Prompt pool: cosine selection oracle, prepend layout, key loss, the
surrogate query path, and the frozen random projection."""

import numpy as np
import pytest

from repcl import profiler
from repcl.backbone import ViT, ViTConfig
from repcl.prompting import (LossWeights, PromptPool, RandomProjection,
                             prepend, prompt_key_loss, query_surrogate,
                             select_prompt, total_loss)
from repcl.tensor import Tensor, rng_stream, tsum

CFG = ViTConfig(image_side=16, patch_side=8, depth=2, width=16, heads=2,
                mlp_ratio=2, n_classes=3)


def test_selection_matches_exhaustive_cosine_scan():
    pool = PromptPool(m=7, prompt_len=3, width=16, seed=0)
    rng = rng_stream(0, "sel")
    q = rng.normal(size=(50, 16))
    got = select_prompt(q, pool)
    keys = pool.keys.data
    for i in range(50):
        best, best_s = 0, -np.inf
        for m in range(7):
            denom = np.linalg.norm(keys[m]) * np.linalg.norm(q[i])
            s = keys[m] @ q[i] / denom if denom > 0 else 0.0
            if s > best_s:
                best, best_s = m, s
        assert got[i] == best


def test_selection_is_scale_invariant():
    pool = PromptPool(m=5, prompt_len=2, width=8, seed=1)
    q = rng_stream(1, "sel").normal(size=(20, 8))
    np.testing.assert_array_equal(select_prompt(q, pool),
                                  select_prompt(q * 37.5, pool))


def test_selection_zero_query_is_safe_and_deterministic():
    pool = PromptPool(m=4, prompt_len=2, width=8, seed=2)
    idx = select_prompt(np.zeros((3, 8)), pool)
    np.testing.assert_array_equal(idx, [0, 0, 0])  # ties break to lowest index


def test_prepend_layout_cls_prompts_patches():
    vit = ViT(CFG, seed=0, init_stream="init-main")
    pool = PromptPool(m=4, prompt_len=3, width=16, seed=0)
    x = rng_stream(0, "img").uniform(0, 1, size=(2, 16, 16))
    tokens = vit.embed(x)
    idx = np.array([2, 0])
    out = prepend(tokens, pool, idx)
    assert out.n_tokens == tokens.n_tokens + 3
    assert out.prompt_len == 3
    assert out.protected_len == 4
    np.testing.assert_array_equal(out.x.data[:, 0], tokens.x.data[:, 0])
    np.testing.assert_array_equal(out.x.data[0, 1:4], pool.prompts.data[2])
    np.testing.assert_array_equal(out.x.data[1, 1:4], pool.prompts.data[0])
    np.testing.assert_array_equal(out.x.data[:, 4:], tokens.x.data[:, 1:])


def test_prepend_twice_is_an_error():
    vit = ViT(CFG, seed=0, init_stream="init-main")
    pool = PromptPool(m=2, prompt_len=2, width=16, seed=0)
    tokens = vit.embed(np.zeros((1, 16, 16)))
    once = prepend(tokens, pool, np.array([0]))
    with pytest.raises(ValueError):
        prepend(once, pool, np.array([0]))


def test_key_loss_is_one_minus_cosine():
    pool = PromptPool(m=3, prompt_len=2, width=4, seed=3)
    pool.keys.data[:] = np.eye(3, 4)
    q = np.array([[1.0, 0, 0, 0], [0, 2.0, 0, 0]])
    loss = prompt_key_loss(pool, np.array([0, 1]), q)
    np.testing.assert_allclose(loss.data, 0.0, atol=1e-12)
    loss2 = prompt_key_loss(pool, np.array([1, 0]), q)  # orthogonal picks
    np.testing.assert_allclose(loss2.data, 1.0, atol=1e-12)


def test_key_loss_gradient_only_reaches_selected_keys():
    pool = PromptPool(m=4, prompt_len=2, width=4, seed=4)
    q = rng_stream(4, "q").normal(size=(3, 4))
    loss = prompt_key_loss(pool, np.array([1, 1, 3]), q)
    loss.backward()
    g = pool.keys.tensor.grad
    assert np.abs(g[1]).sum() > 0 and np.abs(g[3]).sum() > 0
    np.testing.assert_array_equal(g[0], 0)
    np.testing.assert_array_equal(g[2], 0)


def test_total_loss_weights_follow_config():
    pool = PromptPool(m=2, prompt_len=2, width=4, seed=5)
    q = rng_stream(5, "q").normal(size=(2, 4))
    idx = np.array([0, 1])
    class_loss = Tensor(np.array(2.0), requires_grad=True)
    w = LossWeights(eps1=1.0, eps2=0.0)
    lk = prompt_key_loss(pool, idx, q)
    out = total_loss(class_loss, pool, idx, q, w)
    np.testing.assert_allclose(out.data, 2.0 + lk.data, atol=1e-12)
    w0 = LossWeights(eps1=0.0, eps2=0.0)
    out0 = total_loss(class_loss, pool, idx, q, w0)
    np.testing.assert_allclose(out0.data, 2.0, atol=1e-12)


def test_random_projection_is_frozen_and_seeded():
    a = RandomProjection(16, 8, seed=9)
    b = RandomProjection(16, 8, seed=9)
    c = RandomProjection(16, 8, seed=10)
    np.testing.assert_array_equal(a.matrix, b.matrix)
    assert not np.array_equal(a.matrix, c.matrix)
    assert a.matrix.shape == (16, 8)


def test_random_projection_preserves_norms_on_average():
    """Johnson-Lindenstrauss sanity: with entries N(0, 1/d_in), the squared
    norm of the image is an unbiased estimate of d_out/d_in-scaled input."""
    d_in, d_out, trials = 24, 96, 400
    rng = rng_stream(0, "jl")
    x = rng.normal(size=(1, d_in))
    x /= np.linalg.norm(x)
    ratios = []
    for s in range(trials):
        phi = RandomProjection(d_out, d_in, seed=s)
        y = phi(x)
        ratios.append(np.linalg.norm(y) ** 2)
    mean = np.mean(ratios)
    want = d_out / d_in
    assert abs(mean - want) / want < 0.15


def test_identity_projection_passes_through():
    phi = RandomProjection(8, 8, matrix=np.eye(8))
    x = rng_stream(1, "jl").normal(size=(3, 8))
    np.testing.assert_array_equal(phi(x), x)


def test_projection_cost_is_charged():
    phi = RandomProjection(16, 8, seed=0)
    x = np.zeros((4, 8))
    prof = profiler.Profiler()
    with prof:
        prof.step_reset()
        phi(x)
        row = prof.commit_step("train", 0, 0)
    assert row.flops == 2 * 8 * 16 * 4


def test_surrogate_query_shape_lifts_to_backbone_width():
    surr = ViT(ViTConfig(image_side=16, patch_side=8, depth=1, width=8,
                         heads=2, mlp_ratio=2, n_classes=3),
               seed=0, init_stream="init-surrogate")
    phi = RandomProjection(16, 8, seed=0)
    x = rng_stream(2, "img").uniform(0, 1, size=(5, 16, 16))
    q = query_surrogate(x, surr, phi)
    assert q.shape == (5, 16)


def test_degenerate_key_reinit_restores_nonzero_norm():
    pool = PromptPool(m=3, prompt_len=2, width=8, seed=6)
    pool.keys.data[1] = 0.0
    pool.reinit_degenerate_keys()
    assert np.linalg.norm(pool.keys.data[1]) > 1e-9
    # deterministic given the pool's seeded stream
    pool2 = PromptPool(m=3, prompt_len=2, width=8, seed=6)
    pool2.keys.data[1] = 0.0
    pool2.reinit_degenerate_keys()
    np.testing.assert_array_equal(pool.keys.data, pool2.keys.data)
