import math

import numpy as np
import pytest

from lvt.nn import (
    AttentionConfig,
    FfnParams,
    PatchEmbedParams,
    SrConfig,
    attention_backward,
    attention_forward,
    attention_weights,
    mix_ffn,
    overlapped_patch_embed,
    patch_embed_spec,
    scaled_dot_attention,
    spatial_reduction,
    spatial_reduction_backward,
    trunc_normal,
)
from lvt.tensor import ShapeError
from lvt.toolkit.gradcheck import finite_diff_grad, relative_error
from lvt.toolkit.oracles import oracle_attention, oracle_conv2d


def test_attention_config():
    cfg = AttentionConfig(160, 5)
    assert cfg.head_dim == 32
    assert cfg.logit_scale == pytest.approx(1 / math.sqrt(32))
    with pytest.raises(ValueError):
        AttentionConfig(64, 3)


def test_zero_query_gives_column_mean_of_values(rng):
    cfg = AttentionConfig(8, 2)
    V = rng.normal(size=(5, 8))
    out = scaled_dot_attention(np.zeros((3, 8)), rng.normal(size=(5, 8)), V, cfg)
    np.testing.assert_allclose(out, np.broadcast_to(V.mean(0), (3, 8)), rtol=1e-12)


def test_single_key_returns_its_value(rng):
    cfg = AttentionConfig(6, 3)
    V = rng.normal(size=(1, 6))
    out = scaled_dot_attention(rng.normal(size=(4, 6)), rng.normal(size=(1, 6)), V, cfg)
    np.testing.assert_allclose(out, np.repeat(V, 4, 0), rtol=1e-12)


def test_two_token_hand_expansion(rng):
    Q, K, V = (rng.normal(size=(2, 2)) for _ in range(3))
    out = scaled_dot_attention(Q, K, V, AttentionConfig(2, 1))
    s = 1 / math.sqrt(2)
    for n in range(2):
        l0, l1 = s * Q[n] @ K[0], s * Q[n] @ K[1]
        p0 = 1 / (1 + math.exp(l1 - l0))
        np.testing.assert_allclose(out[n], p0 * V[0] + (1 - p0) * V[1], rtol=1e-10)


def test_attention_matches_loop_oracle(rng):
    cfg = AttentionConfig(12, 3)
    Q, K, V = rng.normal(size=(7, 12)), rng.normal(size=(5, 12)), rng.normal(size=(5, 12))
    np.testing.assert_allclose(scaled_dot_attention(Q, K, V, cfg), oracle_attention(Q, K, V, 3), rtol=1e-10)


def test_attention_rows_and_permutation(rng):
    cfg = AttentionConfig(8, 4)
    Q, K, V = rng.normal(size=(6, 8)), rng.normal(size=(9, 8)), rng.normal(size=(9, 8))
    P = attention_weights(Q, K, cfg)
    assert P.shape == (4, 6, 9)
    np.testing.assert_allclose(P.sum(-1), 1, atol=1e-12)
    perm = rng.permutation(9)
    np.testing.assert_allclose(scaled_dot_attention(Q, K[perm], V[perm], cfg), scaled_dot_attention(Q, K, V, cfg), atol=1e-12)


def test_attention_rejects_mismatch():
    with pytest.raises(ShapeError):
        scaled_dot_attention(np.zeros((2, 8)), np.zeros((3, 8)), np.zeros((4, 8)), AttentionConfig(8, 2))


def test_attention_backward_matches_fd(rng):
    cfg = AttentionConfig(6, 2)
    Q, K, V = rng.normal(size=(4, 6)), rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    R = rng.normal(size=(4, 6))
    out, P = attention_forward(Q, K, V, cfg)
    dQ, dK, dV = attention_backward(Q, K, V, P, R, cfg)
    f = lambda q, k, v: float((scaled_dot_attention(q, k, v, cfg) * R).sum())  # noqa: E731
    assert relative_error(dQ, finite_diff_grad(lambda a: f(a, K, V), Q)) < 1e-6
    assert relative_error(dK, finite_diff_grad(lambda a: f(Q, a, V), K)) < 1e-6
    assert relative_error(dV, finite_diff_grad(lambda a: f(Q, K, a), V)) < 1e-6


# --------------------------------------------------------------------------
# spatial reduction


def test_sr_ratio_one_is_identity_on_tokens(rng):
    x = rng.normal(size=(4, 3, 5))
    sr = SrConfig.init(4, 1, rng)
    assert sr.num_params() == 0
    np.testing.assert_array_equal(spatial_reduction(x, sr), x.reshape(4, -1).T)


def test_sr_stage2_token_count(rng):
    sr = SrConfig.init(64, 4, rng)
    assert spatial_reduction(rng.normal(size=(64, 28, 28)).astype(np.float32), sr).shape == (49, 64)


def test_sr_matches_strided_conv_oracle(rng):
    sr = SrConfig.init(6, 2, rng, np.float64, std=0.3)
    sr.gamma[...] = rng.normal(size=6)
    sr.beta[...] = rng.normal(size=6)
    x = rng.normal(size=(6, 8, 8))
    tok = spatial_reduction(x, sr)
    assert tok.shape == (16, 6)
    s = oracle_conv2d(x, sr.w, sr.b, stride=2).reshape(6, -1).T
    ref = (s - s.mean(1, keepdims=True)) / np.sqrt(s.var(1, keepdims=True) + 1e-6) * sr.gamma + sr.beta
    np.testing.assert_allclose(tok, ref, rtol=1e-9, atol=1e-12)


def test_sr_pads_non_divisible_extent(rng):
    sr = SrConfig.init(3, 4, rng)
    assert spatial_reduction(rng.normal(size=(3, 7, 9)).astype(np.float32), sr).shape == (2 * 3, 3)


def test_sr_invalid_ratio():
    with pytest.raises(ValueError):
        SrConfig(0)


@pytest.mark.parametrize("R,H,W", [(1, 3, 4), (2, 4, 4), (2, 5, 3), (3, 6, 7)])
def test_sr_backward_matches_fd(rng, R, H, W):
    sr = SrConfig.init(4, R, rng, np.float64, std=0.4)
    if R > 1:
        sr.gamma[...] = 1 + rng.normal(0, 0.3, 4)
        sr.beta[...] = rng.normal(size=4)
    x = rng.normal(size=(4, H, W))
    R_ = rng.normal(size=spatial_reduction(x, sr).shape)
    dx, g = spatial_reduction_backward(x, sr, R_)
    assert relative_error(dx, finite_diff_grad(lambda v: float((spatial_reduction(v, sr) * R_).sum()), x)) < 1e-5
    for name, arr in sr.named_arrays().items():
        def f(v, arr=arr):
            saved = arr.copy()
            arr[...] = v
            out = float((spatial_reduction(x, sr) * R_).sum())
            arr[...] = saved
            return out
        assert relative_error(g.named_arrays()[name], finite_diff_grad(f, arr)) < 1e-5, name


# --------------------------------------------------------------------------
# feed-forward and patch embedding


def test_ffn_hidden_width_stage2(rng):
    assert FfnParams.init(64, 8, rng).hidden == 512


def test_ffn_zero_weights_give_zero(rng):
    p = FfnParams.init(4, 2, rng).map_arrays(lambda n, a: np.zeros_like(a))
    np.testing.assert_array_equal(mix_ffn(rng.normal(size=(4, 5, 5)).astype(np.float32), 2, p), 0)


def test_ffn_matches_chained_conv_oracles(rng):
    p = FfnParams.init(3, 2, rng, np.float64, std=0.5).map_arrays(lambda n, a: a + rng.normal(0, 0.1, a.shape))
    x = rng.normal(size=(3, 5, 6))
    h = oracle_conv2d(x, p.w1[:, :, None, None], p.b1)
    h = oracle_conv2d(h, p.w_dw, p.b_dw, padding=1, groups=6)
    h = h / (1 + np.exp(-h))
    ref = oracle_conv2d(h, p.w2[:, :, None, None], p.b2)
    np.testing.assert_allclose(mix_ffn(x, 2, p), ref, rtol=1e-10, atol=1e-12)


def test_ffn_ratio_mismatch(rng):
    with pytest.raises(ShapeError):
        mix_ffn(np.zeros((4, 3, 3)), 3, FfnParams.init(4, 2, rng))


def test_patch_embed_stage1_geometry(rng):
    p = PatchEmbedParams.init(3, 64, 1, rng)
    assert p.w.size + p.b.size == 9472
    y = overlapped_patch_embed(rng.normal(size=(3, 224, 224)).astype(np.float32), 1, p)
    assert y.shape == (64, 56, 56)


@pytest.mark.parametrize("stage,H", [(1, 37), (2, 15), (3, 8), (4, 5)])
def test_patch_embed_extent_formula(rng, stage, H):
    spec = patch_embed_spec(stage)
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    pe = PatchEmbedParams.init(2, 4, stage, rng)
    y = overlapped_patch_embed(rng.normal(size=(2, H, H)).astype(np.float32), stage, pe)
    assert y.shape[1] == (H + 2 * p - k) // s + 1


def test_patch_embed_rejects_bad_stage_and_tiny_input(rng):
    with pytest.raises(ValueError):
        patch_embed_spec(5)
    with pytest.raises(ShapeError):
        overlapped_patch_embed(np.zeros((3, 2, 2), np.float32), 1, PatchEmbedParams.init(3, 4, 1, rng))


def test_patch_embeds_chain_to_stride_32(rng):
    x = rng.normal(size=(3, 96, 64)).astype(np.float32)
    c = 3
    for stage, stride in zip(range(1, 5), (4, 8, 16, 32)):
        x = overlapped_patch_embed(x, stage, PatchEmbedParams.init(c, 8, stage, rng))
        c = 8
        assert x.shape[1:] == (96 // stride, 64 // stride)


def test_trunc_normal_bounds(rng):
    a = trunc_normal(rng, (10000,), 0.02)
    assert a.dtype == np.float32
    assert np.abs(a).max() <= 0.04 + 1e-7
    assert 0.015 < a.std() < 0.02
