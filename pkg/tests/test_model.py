from fractions import Fraction

import numpy as np
import pytest

import leformer.functional as F
from leformer.complexity import count_macs
from leformer.model import (CBAM, MSCA, CrossEncoderFusion, Decoder, EfficientSelfAttention, LEFormer, MixFFN,
                            ModelConfig, PoolMixer)
from leformer.gradcheck import check_gradients
from leformer.nn import Builder, Initializer, ParamStore, count_params
from leformer.tensor import ShapeError, Tensor, backward, no_grad
from leformer.train import cross_entropy_loss

from oracles import conv2d_loops, dense_attention

STAGE_SHAPES = [(32, 64, 64), (64, 32, 32), (160, 16, 16), (192, 8, 8)]


def b64():
    return Builder(ParamStore(), Initializer(0), np.float64)


def zero_all(store):
    for _, t, _ in store.entries():
        t.data[...] = 0


@pytest.fixture(scope="module")
def default_model():
    return LEFormer(ModelConfig(), seed=0)


# -- configuration -------------------------------------------------------------

def test_width_multiplier_channels():
    assert ModelConfig(width_multiplier=Fraction(1, 4)).channels() == (8, 16, 40, 48)
    assert ModelConfig.tiny().channels() == (4, 8, 20, 24)
    assert ModelConfig().channels() == (32, 64, 160, 192)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(ptl_stages=5)
    with pytest.raises(ValueError):
        ModelConfig(use_ce=False, use_te=False)


def test_block_kinds():
    cfg = ModelConfig(ptl_stages=2)
    assert [cfg.block_kind(i) for i in range(4)] == ["PTL", "PTL", "ETL", "ETL"]


# -- shape pipeline -------------------------------------------------------------

def test_stage_shapes_both_branches(default_model):
    with no_grad():
        feats = default_model.encode(Tensor(np.zeros((1, 3, 256, 256), dtype=np.float32)))
    for branch in ("ce", "te", "fused"):
        assert [f.shape[1:] for f in feats[branch]] == STAGE_SHAPES


def test_forward_output_shape(default_model, rng):
    with no_grad():
        y = default_model(Tensor(rng.normal(size=(1, 3, 256, 256)).astype(np.float32)))
    assert y.shape == (1, 2, 256, 256)
    assert y.dtype == np.float32


def test_input_must_be_divisible_by_32(default_model):
    with pytest.raises(ShapeError, match="divisible by 32"):
        default_model(Tensor(np.zeros((1, 3, 48, 64), dtype=np.float32)))


def test_param_total_matches_store_and_analysis(default_model):
    assert default_model.num_params == count_macs(ModelConfig()).total_params
    assert abs(default_model.num_params - 3.61e6) / 3.61e6 < 0.10


@pytest.mark.parametrize("cfg", [ModelConfig(use_ce=False, ptl_stages=0), ModelConfig(use_te=False),
                                 ModelConfig(use_msca=False), ModelConfig(ptl_stages=4)])
def test_analytic_params_match_instantiated(cfg):
    assert LEFormer(cfg).num_params == count_macs(cfg).total_params


def test_no_msca_variant_near_reported():
    p = count_macs(ModelConfig(use_msca=False)).total_params
    assert abs(p - 3.46e6) / 3.46e6 < 0.10


def test_same_seed_same_parameters():
    a, b = LEFormer(ModelConfig.tiny(), seed=5), LEFormer(ModelConfig.tiny(), seed=5)
    assert list(a.params) == list(b.params)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_no_cross_batch_leakage(rng):
    m = LEFormer(ModelConfig.tiny(), seed=0, dtype=np.float64)
    img = rng.normal(size=(1, 3, 64, 64))
    other = rng.normal(size=(1, 3, 64, 64))
    with no_grad():
        y = m(Tensor(np.concatenate([img, img, other]))).data
        solo = m(Tensor(img)).data
    np.testing.assert_array_equal(y[0], y[1])
    np.testing.assert_allclose(y[0], solo[0], rtol=1e-12, atol=1e-12)


def test_every_parameter_receives_gradient(rng):
    m = LEFormer(ModelConfig.tiny(), seed=0, dtype=np.float64)
    x = Tensor(rng.normal(size=(2, 3, 64, 64)))
    backward(cross_entropy_loss(m(x), rng.integers(0, 2, size=(2, 64, 64))))
    dead = [n for n, t in m.params.learnable() if t.grad is None or not np.any(t.grad)]
    assert dead == []


# -- MSCA / CBAM -------------------------------------------------------------------

def test_msca_zero_weights_is_identity(rng):
    b = b64()
    msca = MSCA(b, "msca", 8, 4, 8)
    for name, t, _ in b.store.entries():
        if "cbam" not in name:
            t.data[...] = 0
    x = Tensor(rng.normal(size=(1, 8, 6, 6)))
    np.testing.assert_array_equal(msca(x).data, x.data)


def test_msca_shape_stage1():
    msca = MSCA(Builder(), "msca", 32, 16, 8)
    assert msca(Tensor(np.zeros((1, 32, 64, 64), dtype=np.float32))).shape == (1, 32, 64, 64)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_msca_branch_matches_loop_oracle(rng, d):
    msca = MSCA(b64(), "msca", 8, 4, 4)
    br = msca.branches[d - 1]
    x = rng.normal(size=(1, 8, 9, 9))
    ref = conv2d_loops(x, br.weight.data, br.bias.data, padding=(d, d), dilation=(d, d), groups=br.groups)
    np.testing.assert_allclose(br(Tensor(x)).data, ref, rtol=1e-12, atol=1e-12)


def test_cbam_zero_weights_quarter(rng):
    b = b64()
    cbam = CBAM(b, "cbam", 16, 8)
    zero_all(b.store)
    x = np.full((1, 16, 5, 5), 2.0)
    np.testing.assert_allclose(cbam(Tensor(x)).data, 0.25 * x, rtol=0, atol=1e-15)


def test_cbam_shape():
    cbam = CBAM(Builder(), "cbam", 128, 16)
    assert cbam(Tensor(np.zeros((1, 128, 16, 16), dtype=np.float32))).shape == (1, 128, 16, 16)


def test_cbam_channel_attention_oracle(rng):
    cbam = CBAM(b64(), "cbam", 8, 2)
    x = rng.normal(size=(1, 8, 4, 4))
    w1, w2 = cbam.fc1.weight.data, cbam.fc2.weight.data

    def mlp(v):
        return w2 @ np.maximum(w1 @ v, 0)

    z = mlp(x[0].mean(axis=(1, 2))) + mlp(x[0].max(axis=(1, 2)))
    expect = 1 / (1 + np.exp(-z))
    got = cbam.channel_attention(Tensor(x)).data.reshape(-1)
    np.testing.assert_allclose(got, expect, rtol=1e-13, atol=0)


def test_msca_gradcheck(rng):
    msca = MSCA(b64(), "msca", 4, 2, 2)
    x = Tensor(rng.normal(size=(1, 4, 5, 5)), requires_grad=True)
    w = rng.normal(size=(1, 4, 5, 5))
    params = [msca.proj.weight, msca.branches[2].weight, msca.cbam.fc1.weight, msca.cbam.spatial.weight]
    assert check_gradients(lambda xx, *ps: (msca(xx) * w).sum(), [x] + params) < 1e-4


# -- attention ------------------------------------------------------------------------

def identity_attention(dim, heads=1, reduction=1):
    b = b64()
    attn = EfficientSelfAttention(b, "attn", dim, heads, reduction)
    for lin in (attn.q, attn.k, attn.v, attn.proj):
        lin.weight.data[...] = np.eye(dim)
    return attn


def test_attention_r1_matches_dense_oracle(rng):
    attn = identity_attention(6)
    x = rng.normal(size=(1, 16, 6))
    ref = dense_attention(x[0], x[0], x[0])
    np.testing.assert_allclose(attn(Tensor(x), 4, 4).data[0], ref, atol=1e-12)


def test_attention_weights_sum_to_one(rng):
    attn = EfficientSelfAttention(b64(), "attn", 8, 2, 2)
    attn.keep_attention = True
    attn(Tensor(rng.normal(size=(2, 16, 8))), 4, 4)
    np.testing.assert_allclose(attn.last_attention.sum(axis=-1), 1, atol=1e-6)
    assert attn.last_attention.shape == (2, 2, 16, 4)


def test_stage1_reduced_length():
    attn = EfficientSelfAttention(Builder(), "attn", 32, 1, 8)
    attn.keep_attention = True
    attn(Tensor(np.zeros((1, 4096, 32), dtype=np.float32)), 64, 64)
    assert attn.last_attention.shape[-2:] == (4096, 64)


def test_attention_rejects_indivisible_size(rng):
    attn = EfficientSelfAttention(b64(), "attn", 4, 1, 4)
    with pytest.raises(ShapeError):
        attn(Tensor(rng.normal(size=(1, 36, 4))), 6, 6)


# -- Mix-FFN / PTL -------------------------------------------------------------------------

def test_mixffn_zero_weights_identity(rng):
    b = b64()
    ffn = MixFFN(b, "ffn", 32, 4)
    zero_all(b.store)
    x = Tensor(rng.normal(size=(2, 64, 32)))
    y = ffn(x, 8, 8)
    assert y.shape == (2, 64, 32)
    np.testing.assert_array_equal(y.data, x.data)


def test_mixffn_gradcheck(rng):
    ffn = MixFFN(b64(), "ffn", 8, 2)
    x = Tensor(rng.normal(size=(1, 16, 8)), requires_grad=True)
    w = rng.normal(size=(1, 16, 8))
    assert check_gradients(lambda xx, a, c: (ffn(xx, 4, 4) * w).sum(), [x, ffn.fc1.weight, ffn.dw.weight]) < 1e-4


def test_pool_of_constant_is_constant():
    m = np.full((1, 3, 5, 5), 1.7)
    pooled = F.pool2d("avg", Tensor(m), 3, 1, 1, count_include_pad=False).data
    np.testing.assert_allclose(pooled, m, rtol=1e-15)
    seq = F.map_to_seq(Tensor(m))
    np.testing.assert_allclose(PoolMixer()(seq, 5, 5).data, 0, atol=1e-15)


# -- fusion / decoder -------------------------------------------------------------------------

def test_cef_selection_kernel(rng):
    b = b64()
    cef = CrossEncoderFusion(b, "s", 4)
    w = np.zeros((4, 8, 1, 1))
    w[:, :4, 0, 0] = np.eye(4)
    cef.fuse.weight.data[...] = w
    ce = Tensor(rng.normal(size=(1, 4, 3, 3)))
    te_map = rng.normal(size=(1, 4, 3, 3))
    te_seq = F.map_to_seq(Tensor(te_map))
    np.testing.assert_allclose(cef(ce, te_seq).data, F.gelu(Tensor(te_map)).data, atol=1e-15)


def test_cef_stage3_shape():
    cef = CrossEncoderFusion(Builder(), "s", 160)
    out = cef(Tensor(np.zeros((1, 160, 16, 16), dtype=np.float32)), Tensor(np.zeros((1, 256, 160), dtype=np.float32)))
    assert out.shape == (1, 160, 16, 16)


def test_gradient_reaches_both_branches(rng):
    m = LEFormer(ModelConfig.tiny(), seed=1, dtype=np.float64)
    backward(cross_entropy_loss(m(Tensor(rng.normal(size=(1, 3, 32, 32)))), rng.integers(0, 2, size=(1, 32, 32))))
    for prefix in ("ce/", "te/"):
        grads = [t.grad for n, t in m.params.learnable() if n.startswith(prefix)]
        assert all(g is not None for g in grads) and any(np.abs(g).max() > 0 for g in grads)


def test_decoder_projection_params_at_256():
    b = Builder()
    Decoder(b, "decoder", (32, 64, 160, 192), 256, 2)
    assert sum(count_params(b.store, f"decoder/proj{i}") for i in range(1, 5)) == 115_712


def test_decoder_argmax_shift_invariance(rng):
    m = LEFormer(ModelConfig.tiny(), seed=0, dtype=np.float64)
    x = Tensor(rng.normal(size=(1, 3, 32, 32)))
    with no_grad():
        before = m(x).data.argmax(axis=1)
        m.params["decoder/classifier/bias"].data += 3.0
        after = m(x).data.argmax(axis=1)
    np.testing.assert_array_equal(before, after)


def test_end_to_end_sampled_gradcheck():
    from leformer.gradcheck import model_gradcheck
    rows = model_gradcheck(ModelConfig.tiny(), n_samples=20, seed=0)
    assert len(rows) == 20
    assert max(r[4] for r in rows) < 1e-4
