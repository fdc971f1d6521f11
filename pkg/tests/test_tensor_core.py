import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import leformer.functional as F
from leformer import _kernels
from leformer._kernels import _fallback
from leformer.gradcheck import check_gradients, finite_diff_grad, rel_error
from leformer.tensor import BackwardError, ShapeError, Tensor, backward, concat, matmul

from oracles import bilinear_loops, conv2d_loops, pool2d_loops


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def rand(rng, *shape):
    return t64(rng.uniform(-1, 1, size=shape))


# -- elementwise -------------------------------------------------------------

def test_gelu_and_sigmoid_values():
    assert F.gelu(t64([0.0])).data[0] == 0.0
    assert F.sigmoid(t64([0.0])).data[0] == 0.5
    phi1 = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    assert F.gelu(t64([1.0])).data[0] == pytest.approx(phi1, abs=1e-12)
    assert F.gelu(t64([1.0])).data[0] == pytest.approx(0.8413447, abs=1e-7)


def test_gelu_is_exact_not_tanh():
    x = 2.0
    exact = x * 0.5 * (1 + math.erf(x / math.sqrt(2)))
    tanh_form = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    got = F.gelu(t64([x])).data[0]
    assert got == pytest.approx(exact, abs=1e-14)
    assert abs(got - tanh_form) > 1e-6


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_broadcast_grads(rng, kind):
    a, b = rand(rng, 2, 3, 4), rand(rng, 3, 1)
    err = check_gradients(lambda x, y: F.elementwise(kind, x, y).sum(), [a, b])
    assert err < 1e-4
    assert F.elementwise(kind, a, b).shape == (2, 3, 4)


@pytest.mark.parametrize("kind", ["gelu", "sigmoid", "relu"])
def test_unary_grads(rng, kind):
    x = rand(rng, 3, 5)
    x.data[np.abs(x.data) < 1e-3] = 0.5  # keep relu away from its kink
    w = rng.normal(size=(3, 5))
    assert check_gradients(lambda v: (F.elementwise(kind, v) * w).sum(), [x]) < 1e-4


def test_shape_mismatch_names_both_shapes(rng):
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        F.elementwise("add", rand(rng, 2, 3), rand(rng, 4))


def test_div_exp_log_sqrt_grads(rng):
    a = rand(rng, 4)
    b = t64(rng.uniform(0.5, 2.0, size=4))
    from leformer.tensor import exp, log, sqrt
    assert check_gradients(lambda x, y: (x / y).sum(), [a, b]) < 1e-4
    assert check_gradients(lambda y: (log(y) + sqrt(y) + exp(y)).sum(), [b]) < 1e-4


# -- matmul -------------------------------------------------------------------

def test_matmul_examples():
    eye = t64(np.eye(2))
    m = t64([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(eye, m).data, m.data)
    assert matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradcheck(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    assert check_gradients(lambda x, y: (matmul(x, y) * w).sum(), [a, b], h=1e-5) < 1e-4


def test_matmul_batched_gradcheck(rng):
    a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
    assert check_gradients(lambda x, y: matmul(x, y).sum(), [a, b]) < 1e-4


def test_matmul_inner_mismatch(rng):
    with pytest.raises(ShapeError):
        matmul(rand(rng, 2, 3), rand(rng, 4, 2))


# -- convolution --------------------------------------------------------------

def test_conv_stage1_shape():
    x = Tensor(np.zeros((1, 3, 256, 256), np.float32))
    w = Tensor(np.zeros((32, 3, 7, 7), np.float32))
    assert F.conv2d(x, w, stride=4, padding=3).shape == (1, 32, 64, 64)


def test_conv_identity_kernel(rng):
    x = rand(rng, 2, 3, 5, 5)
    w = t64(np.eye(3).reshape(3, 3, 1, 1))
    y = F.conv2d(x, w, t64(np.zeros(3)))
    assert np.array_equal(y.data, x.data)


def test_conv_dilated_matches_loops(rng):
    x = rng.uniform(-1, 1, (1, 1, 8, 8))
    w = rng.uniform(-1, 1, (1, 1, 3, 3))
    y = F.conv2d(t64(x), t64(w), stride=1, padding=2, dilation=2)
    assert y.shape == (1, 1, 8, 8)
    np.testing.assert_allclose(y.data, conv2d_loops(x, w, padding=(2, 2), dilation=(2, 2)), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(3, 10), w=st.integers(3, 10), k=st.integers(1, 5), d=st.integers(1, 3),
    s=st.integers(1, 3), p=st.integers(0, 3), cin=st.integers(1, 3), depthwise=st.booleans(),
    seed=st.integers(0, 1000),
)
def test_conv_matches_loops_property(h, w, k, d, s, p, cin, depthwise, seed):
    if h + 2 * p < d * (k - 1) + 1 or w + 2 * p < d * (k - 1) + 1:
        return
    rng = np.random.default_rng(seed)
    groups = cin if depthwise else 1
    cout = cin if depthwise else 2
    x = rng.uniform(-1, 1, (2, cin, h, w))
    wt = rng.uniform(-1, 1, (cout, cin // groups, k, k))
    b = rng.uniform(-1, 1, cout)
    y = F.conv2d(t64(x), t64(wt), t64(b), stride=s, padding=p, dilation=d, groups=groups)
    ref = conv2d_loops(x, wt, b, (s, s), (p, p), (d, d), groups)
    np.testing.assert_allclose(y.data, ref, atol=1e-12)


@pytest.mark.parametrize("groups,dil,stride", [(1, 1, 1), (2, 2, 1), (4, 1, 2), (1, 3, 2)])
def test_conv_gradcheck(rng, groups, dil, stride):
    x, w, b = rand(rng, 2, 4, 7, 7), rand(rng, 4, 4 // groups, 3, 3), rand(rng, 4)
    wout = rng.normal(size=F.conv2d(x, w, b, stride, dil, dil, groups).shape)
    f = lambda x_, w_, b_: (F.conv2d(x_, w_, b_, stride, dil, dil, groups) * wout).sum()
    assert check_gradients(f, [x, w, b]) < 1e-4


def test_conv_errors(rng):
    with pytest.raises(ShapeError, match="groups"):
        F.conv2d(rand(rng, 1, 3, 5, 5), rand(rng, 4, 1, 3, 3), groups=2)
    with pytest.raises(ShapeError, match="larger than padded"):
        F.conv2d(rand(rng, 1, 1, 2, 2), rand(rng, 1, 1, 5, 5))


def test_kernel_backends_agree(rng):
    x = rng.uniform(-1, 1, (2, 3, 9, 11)).astype(np.float32)
    for geom in [(3, 3, 1, 1, 1, 1, 1, 1), (7, 7, 4, 4, 3, 3, 1, 1), (3, 3, 2, 1, 4, 4, 4, 4)]:
        a = _kernels.im2col(x, *geom)
        b = _fallback.im2col(x, *geom)
        assert np.array_equal(a, b)
        np.testing.assert_allclose(_kernels.col2im(a, x.shape, *geom), _fallback.col2im(b, x.shape, *geom),
                                   rtol=1e-6, atol=1e-6)


try:
    from leformer._kernels import _im2col as compiled_kernels
except ImportError:
    compiled_kernels = None


@pytest.mark.skipif(compiled_kernels is None, reason="compiled kernels not built")
@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), k=st.integers(1, 5), s=st.integers(1, 4),
       p=st.integers(0, 6), d=st.integers(1, 4), pad_value=st.sampled_from([0.0, -np.inf]),
       dtype=st.sampled_from([np.float32, np.float64]), seed=st.integers(0, 2**16))
def test_compiled_kernels_match_fallback(h, w, k, s, p, d, pad_value, dtype, seed):
    if h + 2 * p < d * (k - 1) + 1 or w + 2 * p < d * (k - 1) + 1:
        return
    x = np.random.default_rng(seed).uniform(-1, 1, (2, 2, h, w)).astype(dtype)
    geom = (k, k, s, s, p, p, d, d)
    a = compiled_kernels.im2col(x, *geom, pad_value=pad_value)
    b = _fallback.im2col(x, *geom, pad_value=pad_value)
    assert a.dtype == b.dtype == dtype
    assert np.array_equal(a, b)
    finite = np.where(np.isfinite(b), b, 0).astype(dtype)
    np.testing.assert_allclose(compiled_kernels.col2im(finite, x.shape, *geom),
                               _fallback.col2im(finite, x.shape, *geom), rtol=1e-5, atol=1e-5)


# -- pooling ------------------------------------------------------------------

def test_avg_pool_constant_interior():
    x = t64(np.full((1, 1, 5, 5), 3.5))
    y = F.pool2d("avg", x, 3, 1, 1)
    assert np.allclose(y.data[0, 0, 1:-1, 1:-1], 3.5)
    # count_include_pad: corner sees 4 of 9 taps
    assert y.data[0, 0, 0, 0] == pytest.approx(3.5 * 4 / 9)
    y2 = F.pool2d("avg", x, 3, 1, 1, count_include_pad=False)
    assert np.allclose(y2.data, 3.5)


def test_max_pool_example():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert F.pool2d("max", x, 2).data.item() == 4.0


@pytest.mark.parametrize("kind,include", [("avg", True), ("avg", False), ("max", True)])
def test_pool_matches_loops(rng, kind, include):
    x = rng.uniform(-1, 1, (1, 2, 5, 5))
    y = F.pool2d(kind, t64(x), 3, 1, 1, count_include_pad=include)
    np.testing.assert_allclose(y.data, pool2d_loops(kind, x, 3, 1, 1, include), atol=1e-12)


@pytest.mark.parametrize("kind,include", [("avg", True), ("avg", False), ("max", True)])
def test_pool_gradcheck(rng, kind, include):
    x = rand(rng, 1, 2, 5, 5)
    w = rng.normal(size=(1, 2, 5, 5))
    f = lambda v: (F.pool2d(kind, v, 3, 1, 1, count_include_pad=include) * w).sum()
    assert check_gradients(f, [x]) < 1e-4


def test_pool_kernel_too_large(rng):
    with pytest.raises(ShapeError):
        F.pool2d("avg", rand(rng, 1, 1, 2, 2), 5)


# -- reductions, softmax, layernorm ---------------------------------------------

@pytest.mark.parametrize("kind", ["sum", "mean", "max"])
@pytest.mark.parametrize("axis,keep", [(None, False), (1, True), ((0, 2), False)])
def test_reduce_grads(rng, kind, axis, keep):
    x = rand(rng, 3, 4, 5)
    w = rng.normal(size=getattr(x, kind)(axis, keep).shape)
    assert check_gradients(lambda v: (getattr(v, kind)(axis, keep) * w).sum(), [x]) < 1e-4


def test_reduce_invalid_axis(rng):
    with pytest.raises(ShapeError):
        rand(rng, 2, 3).sum(axis=5)


def test_softmax_examples_and_grad(rng):
    np.testing.assert_allclose(F.softmax(t64([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    x = rand(rng, 8)
    w = rng.normal(size=8)
    assert check_gradients(lambda v: (F.softmax(v) * w).sum(), [x]) < 1e-4
    y = F.softmax(rand(rng, 6, 9), axis=-1)
    assert np.all(np.abs(y.data.sum(-1) - 1) < 1e-6)


def test_log_softmax_grad(rng):
    x = rand(rng, 3, 4)
    w = rng.normal(size=(3, 4))
    assert check_gradients(lambda v: (F.log_softmax(v, 1) * w).sum(), [x]) < 1e-4


def test_layernorm(rng):
    y = F.layer_norm(t64(np.full(6, 2.5)), 1, t64(np.ones(6)), t64(np.zeros(6)))
    assert np.allclose(y.data, 0.0)
    x = rand(rng, 4, 7) * 3 + 1
    y = F.layer_norm(x, 1, eps=1e-12)
    assert np.all(np.abs(y.data.mean(-1)) < 1e-5)
    assert np.all(np.abs(y.data.var(-1) - 1) < 1e-5)
    g, b = rand(rng, 7), rand(rng, 7)
    w = rng.normal(size=(4, 7))
    assert check_gradients(lambda v, gg, bb: (F.layer_norm(v, 1, gg, bb) * w).sum(), [rand(rng, 4, 7), g, b]) < 1e-4
    with pytest.raises(ValueError):
        F.layer_norm(x, 1, eps=0.0)


# -- shape ops -------------------------------------------------------------------

def test_reshape_roundtrip_bitwise(rng):
    x = rand(rng, 4, 6)
    y = x.reshape(4, 2, 3).reshape(4, 6)
    assert np.array_equal(x.data, y.data)
    z = x.permute(1, 0).permute(1, 0)
    assert np.array_equal(x.data, z.data)
    with pytest.raises(ShapeError):
        x.reshape(5, 5)


def test_concat_and_slice(rng):
    a, b = rand(rng, 32, 4, 4), rand(rng, 32, 4, 4)
    assert concat([a, b], 0).shape == (64, 4, 4)
    with pytest.raises(ShapeError):
        concat([a, rand(rng, 32, 5, 4)], 0)
    w = rng.normal(size=(3, 4, 4))
    assert check_gradients(lambda u, v: (concat([u, v], 0)[30:33] * w).sum(), [a, b]) < 1e-4


def test_upsample_bilinear_oracle(rng):
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    y = F.upsample_bilinear(t64(x[None, None]), (4, 4)).data[0, 0]
    np.testing.assert_allclose(y, bilinear_loops(x, 4, 4), atol=1e-14)
    np.testing.assert_allclose(y[0], [1.0, 1.25, 1.75, 2.0])
    z = rng.uniform(size=(3, 5))
    np.testing.assert_allclose(F.upsample_bilinear(t64(z[None, None]), (7, 4)).data[0, 0],
                               bilinear_loops(z, 7, 4), atol=1e-14)


def test_upsample_gradcheck(rng):
    x = rand(rng, 1, 2, 3, 3)
    w = rng.normal(size=(1, 2, 6, 6))
    assert check_gradients(lambda v: (F.upsample_bilinear(v, 6) * w).sum(), [x]) < 1e-4


# -- backward contract -------------------------------------------------------------

def test_backward_examples():
    x = t64([1.0, 2.0, 3.0])
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones(3))
    x = t64([1.0, 2.0])
    backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_errors():
    x = t64([1.0, 2.0])
    with pytest.raises(BackwardError):
        backward(x * 2.0)
    loss = (x * 3.0).sum()
    backward(loss)
    with pytest.raises(BackwardError):
        backward(loss)


def test_gradients_accumulate_across_passes():
    x = t64([1.0, 2.0])
    backward((x * 2.0).sum())
    backward((x * 3.0).sum())
    assert x.grad.tolist() == [5.0, 5.0]


def test_finite_diff_grad_matches_analytic():
    x = t64([0.3, -0.7, 1.1])
    g = finite_diff_grad(lambda v: (v * v * v).sum(), x, 1e-5)
    np.testing.assert_allclose(g, 3 * x.data ** 2, rtol=1e-8)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_backward_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, size=(3, 4))
    f = lambda v: F.gelu(v).sum()
    g = lambda v: (F.softmax(v, -1) * v).sum()

    def grad_of(fn):
        x = t64(x0.copy())
        backward(fn(x))
        return x.grad

    combo = grad_of(lambda v: f(v) * a + g(v) * b)
    np.testing.assert_allclose(combo, a * grad_of(f) + b * grad_of(g), rtol=1e-10, atol=1e-12)


def test_float32_stays_float32(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)).astype(np.float32), requires_grad=True)
    y = F.gelu(F.conv2d(x, w, padding=1)) * 2.0 + 1.0
    assert y.dtype == np.float32
    backward(F.layer_norm(F.map_to_seq(y), 1).sum())
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32
    assert np.isfinite(x.grad).all()


def test_mac_trace_counts(rng):
    with F.mac_trace() as tr:
        F.conv2d(Tensor(np.zeros((1, 3, 256, 256), np.float32)), Tensor(np.zeros((32, 3, 7, 7), np.float32)),
                 stride=4, padding=3)
        matmul(rand(rng, 2, 3, 4), rand(rng, 4, 5))
    assert tr.records[0][1] == 32 * 64 * 64 * 3 * 49 == 19_267_584
    assert tr.records[1][1] == 2 * 3 * 4 * 5


def test_rel_error_floor():
    assert rel_error(0.0, 1e-9) < 1e-1
