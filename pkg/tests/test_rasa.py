import numpy as np
import pytest

from lvt import _backend
from lvt.rasa import (
    AsaParams,
    RasaConfig,
    asa_backward,
    asa_branches,
    asa_forward,
    asa_query,
    rasa_backward,
    rasa_forward,
)
from lvt.nn import spatial_reduction
from lvt.tensor import ShapeError
from lvt.toolkit.gradcheck import check_gradients
from lvt.toolkit.oracles import oracle_asa
from lvt.toolkit.suite import gradcheck_rasa, random_asa_params


def test_query_param_count_d64(rng):
    p = AsaParams.init(64, 2, 4, rng)
    assert p.query_param_count() == 64 * 64 + 9 * 64 == 4672
    assert p.query_param_count(biases=True) == 4672 + 128
    assert p.w_qd.shape == (64, 1, 3, 3)


def test_zero_kernel_gives_zero_query(rng):
    p = AsaParams.init(8, 2, 2, rng)
    p.w_qd[...] = 0
    np.testing.assert_array_equal(asa_query(rng.normal(size=(8, 6, 6)).astype(np.float32), p), 0)


def test_zero_query_gives_uniform_attention(rng):
    p = random_asa_params(rng, 8, 2, 2)
    p.w_qd[...] = 0
    p.b_qd[...] = 0
    x = rng.normal(size=(8, 6, 6))
    V = spatial_reduction(x, p.sr) @ p.w_v.T + p.b_v
    expect = V.mean(0) @ p.w_out.T + p.b_out
    y = asa_forward(x, p)
    np.testing.assert_allclose(y.reshape(8, -1).T, np.broadcast_to(expect, (36, 8)), rtol=1e-10)


def test_constant_field_branches_agree_in_interior(rng):
    p = random_asa_params(rng, 4, 2, 1)
    x = np.broadcast_to(rng.normal(size=(4, 1, 1)), (4, 13, 13)).copy()
    b1, b3, b5 = asa_branches(x, p)
    inner = (slice(None), slice(5, 8), slice(5, 8))
    np.testing.assert_allclose(b1[inner], b3[inner], rtol=1e-12)
    np.testing.assert_allclose(b1[inner], b5[inner], rtol=1e-12)
    q = asa_query(x, p)
    np.testing.assert_allclose(q[inner], 3 * b1[inner] / (1 + np.exp(-b1[inner])), rtol=1e-12)


def test_shared_kernel_changes_every_branch(rng):
    p = random_asa_params(rng, 4, 2, 2)
    x = rng.normal(size=(4, 12, 12))
    before = asa_branches(x, p)
    p.w_qd[1, 0, 2, 0] += 1.0
    after = asa_branches(x, p)
    for a, b in zip(before, after):
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a[[0, 2, 3]], b[[0, 2, 3]])  # depthwise: other channels untouched


def test_dilation_rates_do_not_change_param_count(rng):
    n = AsaParams.init(16, 2, 2, rng).num_params()
    assert AsaParams.init(16, 2, 2, rng, dilations=(1, 2)).num_params() == n
    assert AsaParams.init(16, 2, 2, rng, dilations=(2, 4, 6, 8)).num_params() == n


def test_sr_one_keeps_token_count(rng):
    p = AsaParams.init(16, 8, 1, rng)
    assert p.sr.num_params() == 0
    assert spatial_reduction(rng.normal(size=(16, 7, 7)), p.sr).shape == (49, 16)


@pytest.mark.parametrize("sr,shape", [(1, (8, 4, 4)), (2, (8, 4, 4)), (2, (8, 5, 7)), (4, (8, 9, 6))])
def test_asa_matches_loop_oracle(backend, rng, sr, shape):
    p = random_asa_params(rng, shape[0], 2, sr)
    x = rng.normal(size=shape)
    np.testing.assert_allclose(asa_forward(x, p), oracle_asa(x, p), rtol=1e-9, atol=1e-10)


@pytest.mark.parametrize("d,heads,sr,side", [(64, 2, 4, 28), (160, 5, 2, 14), (256, 8, 1, 7)])
def test_asa_preserves_shape_per_stage(rng, d, heads, sr, side):
    p = AsaParams.init(d, heads, sr, rng)
    x = rng.normal(size=(d, side, side)).astype(np.float32)
    y = asa_forward(x, p)
    assert y.shape == x.shape and y.dtype == np.float32


def test_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        asa_forward(np.zeros((6, 4, 4)), AsaParams.init(8, 2, 2, rng))


def test_rasa_config_validation():
    with pytest.raises(ValueError):
        RasaConfig(0)
    with pytest.raises(ValueError):
        RasaConfig(2, w_f=0.5)
    assert RasaConfig().depth == 2


def test_depth_one_is_bitwise_asa(rng):
    p = random_asa_params(rng, 8, 2, 2, np.float32)
    x = rng.normal(size=(8, 6, 6)).astype(np.float32)
    with _backend.limit_threads(1):
        np.testing.assert_array_equal(rasa_forward(x, p, RasaConfig(1)), asa_forward(x, p))


def test_depth_two_expansion(rng):
    p = random_asa_params(rng, 8, 2, 2)
    x = rng.normal(size=(8, 6, 6))
    np.testing.assert_allclose(rasa_forward(x, p, RasaConfig(2)), asa_forward(asa_forward(x, p) + x, p), rtol=1e-12)


def test_depth_four_recurrence(rng):
    p = random_asa_params(rng, 4, 2, 2)
    x0 = rng.normal(size=(4, 5, 5))
    x1 = asa_forward(x0, p)
    x2 = asa_forward(x1 + x0, p)
    x3 = asa_forward(x2 + x1, p)
    x4 = asa_forward(x3 + x2, p)
    np.testing.assert_allclose(rasa_forward(x0, p, RasaConfig(4)), x4, rtol=1e-12)


def test_output_finite_for_large_inputs(rng):
    p = random_asa_params(rng, 8, 2, 2, std=1.0)
    for scale in (1, 1e2, 1e4):
        assert np.isfinite(rasa_forward(rng.normal(size=(8, 6, 6)) * scale, p, RasaConfig(3))).all()


def test_rasa_backward_zero_upstream(rng):
    p = random_asa_params(rng, 4, 2, 2)
    x = rng.normal(size=(4, 4, 4))
    dx, g = rasa_backward(x, p, RasaConfig(2), np.zeros_like(x))
    assert not dx.any()
    assert all(not a.any() for a in g.named_arrays().values())


def test_depth_one_gradients_equal_asa(rng):
    p = random_asa_params(rng, 4, 2, 2)
    x, R = rng.normal(size=(4, 5, 5)), rng.normal(size=(4, 5, 5))
    dx1, g1 = rasa_backward(x, p, RasaConfig(1), R)
    dx2, g2 = asa_backward(x, p, R)
    np.testing.assert_array_equal(dx1, dx2)
    for n, a in g1.named_arrays().items():
        np.testing.assert_array_equal(a, g2.named_arrays()[n])


def test_asa_gradients_match_fd(rng):
    p = random_asa_params(rng, 6, 3, 2)
    x, R = rng.normal(size=(6, 5, 4)), rng.normal(size=(6, 5, 4))
    dx, g = asa_backward(x, p, R)
    errs = check_gradients(lambda: float((asa_forward(x, p) * R).sum()), x, p, dx, g)
    assert max(errs.values()) <= 1e-4, errs


@pytest.mark.parametrize("d,h,sr,H,W,depth", [(4, 1, 2, 5, 5, 2), (6, 2, 1, 4, 5, 2), (8, 2, 2, 6, 6, 3), (4, 2, 3, 5, 4, 4)])
def test_rasa_gradients_match_fd(backend, rng, d, h, sr, H, W, depth):
    errs = gradcheck_rasa(rng, d, h, sr, H, W, depth)
    assert "w_qd" in errs and "x" in errs
    assert max(errs.values()) <= 1e-4, errs
