"""Differentiable neural-network ops on :class:`~leformer.tensor.Tensor`."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import _kernels
from .tensor import (
    ShapeError,
    Tensor,
    _coerce_pair,
    _mac_hooks,
    _record_macs,
    add,
    broadcast_shape,
    make_result,
    mul,
    sub,
)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected an int pair, got {v}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ----------------------------------------------------------------------------
# MAC tracing
# ----------------------------------------------------------------------------

@dataclass
class MacTrace:
    """Multiply-accumulate counts recorded while a trace is active."""

    records: list = field(default_factory=list)

    def __call__(self, op, macs, shapes):
        self.records.append((op, int(macs), shapes))

    @property
    def total(self) -> int:
        return sum(m for _, m, _ in self.records)

    def by_op(self, op: str) -> list:
        return [r for r in self.records if r[0] == op]


@contextlib.contextmanager
def mac_trace():
    """Record the MACs of every matmul and conv executed inside the block."""
    trace = MacTrace()
    _mac_hooks.append(trace)
    try:
        yield trace
    finally:
        _mac_hooks.remove(trace)


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    y = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return make_result(y, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return make_result(xd * mask, (x,), lambda g: (g * mask,), "relu")


_UNARY = {"gelu": gelu, "sigmoid": sigmoid, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op_kind in _UNARY:
        if b is not None:
            raise TypeError(f"{op_kind} is unary")
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise TypeError(f"{op_kind} needs two operands")
        a, b = _coerce_pair(a, b)
        broadcast_shape(a.shape, b.shape)
        return _BINARY[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ----------------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------------

def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(axis, x.ndim)
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(axis, x.ndim)
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_result(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, normalized_ndim: int = 1, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalise over the trailing ``normalized_ndim`` axes, then apply the affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 1 <= normalized_ndim <= x.ndim:
        raise ShapeError(f"cannot normalise {normalized_ndim} trailing axes of rank-{x.ndim} tensor")
    axes = tuple(range(x.ndim - normalized_ndim, x.ndim))
    norm_shape = x.shape[x.ndim - normalized_ndim:]
    for p in (gamma, beta):
        if p is not None and p.shape != norm_shape:
            raise ShapeError(f"affine parameter shape {p.shape} != normalised shape {norm_shape}")
    xd = x.data
    n = int(np.prod(norm_shape))
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    lead = tuple(range(x.ndim - normalized_ndim))
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def bw(g):
        dxhat = g * gamma.data if gamma is not None else g
        m1 = dxhat.sum(axis=axes, keepdims=True) / n
        m2 = (dxhat * xhat).sum(axis=axes, keepdims=True) / n
        grads = [rstd * (dxhat - m1 - xhat * m2)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return make_result(y.astype(xd.dtype, copy=False), parents, bw, "layer_norm")


# ----------------------------------------------------------------------------
# convolution and pooling
# ----------------------------------------------------------------------------

def conv_out_size(size: int, k: int, s: int, p: int, d: int = 1) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           dilation=1, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding, dilation and channel groups."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"channels (in={cin}, out={cout}) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"weight expects {cin_g * groups} input channels, input has {cin}")
    if h + 2 * ph < dh * (kh - 1) + 1 or w + 2 * pw < dw * (kw - 1) + 1:
        raise ShapeError(f"kernel {kh}x{kw} (dilation {dh},{dw}) larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    ho = conv_out_size(h, kh, sh, ph, dh)
    wo = conv_out_size(w, kw, sw, pw, dw)
    kk = cin_g * kh * kw
    cout_g = cout // groups
    L = ho * wo
    geom = (kh, kw, sh, sw, ph, pw, dh, dw)

    cols = _kernels.im2col(x.data, *geom).reshape(n, groups, kk, L)
    wg = weight.data.reshape(groups, cout_g, kk)
    depthwise = cout_g == 1 and cin_g == 1
    if depthwise:
        out = np.einsum("gk,ngkl->ngl", wg[:, 0, :], cols, optimize=True)
    else:
        out = np.matmul(wg, cols)
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    if _mac_hooks:
        _record_macs("conv2d", n * cout * L * kk, (x.shape, weight.shape))

    parents = [x, weight] + ([bias] if bias is not None else [])
    xshape = x.shape

    def bw(g):
        gg = g.reshape(n, groups, cout_g, L)
        grads = []
        if x.requires_grad:
            if depthwise:
                gcols = wg[None, :, 0, :, None] * gg
            else:
                gcols = np.matmul(np.swapaxes(wg, -1, -2), gg)
            grads.append(_kernels.col2im(gcols.reshape(n, groups * kk, L), xshape, *geom))
        else:
            grads.append(None)
        if weight.requires_grad:
            if depthwise:
                gw = np.einsum("ngl,ngkl->gk", gg[:, :, 0, :], cols, optimize=True)
            else:
                gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0)
            grads.append(gw.reshape(weight.shape))
        else:
            grads.append(None)
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_result(out.astype(x.dtype, copy=False), parents, bw, "conv2d")


def pool2d(kind: str, x: Tensor, kernel, stride=None, padding=0, count_include_pad: bool = True) -> Tensor:
    """Average or max pooling over NCHW input.

    Average pooling divides by the full window area when ``count_include_pad``
    is true, otherwise by the number of in-bounds elements. Max pooling never
    selects padding.
    """
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"pool kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    ho, wo = conv_out_size(h, kh, sh, ph), conv_out_size(w, kw, sw, pw)
    geom = (kh, kw, sh, sw, ph, pw, 1, 1)
    flat_shape = (n * c, 1, h, w)
    xd = x.data.reshape(flat_shape)
    kk = kh * kw
    if kind == "avg":
        cols = _kernels.im2col(xd, *geom, pad_value=0.0)
        if count_include_pad or (ph == 0 and pw == 0):
            denom = np.asarray(kk, dtype=x.dtype)
        else:
            ones = np.ones((1, 1, h, w), dtype=x.dtype)
            denom = _kernels.im2col(ones, *geom, pad_value=0.0).sum(axis=1)  # (1, L)
        out = cols.sum(axis=1) / denom

        def bw(g):
            gc = np.broadcast_to(g.reshape(n * c, 1, ho * wo) / denom, (n * c, kk, ho * wo))
            return (_kernels.col2im(np.ascontiguousarray(gc), flat_shape, *geom).reshape(x.shape),)
    elif kind == "max":
        cols = _kernels.im2col(xd, *geom, pad_value=-np.inf)
        arg = cols.argmax(axis=1)
        out = np.take_along_axis(cols, arg[:, None, :], axis=1)[:, 0, :]

        def bw(g):
            gc = np.zeros((n * c, kk, ho * wo), dtype=x.dtype)
            np.put_along_axis(gc, arg[:, None, :], g.reshape(n * c, 1, ho * wo), axis=1)
            return (_kernels.col2im(gc, flat_shape, *geom).reshape(x.shape),)
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    out = out.reshape(n, c, ho, wo).astype(x.dtype, copy=False)
    return make_result(out, (x,), bw, f"pool2d_{kind}")


# ----------------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------------

def bilinear_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic (out_size, in_size) interpolation matrix, half-pixel centres."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, size) -> Tensor:
    """Bilinear resize of NCHW input to ``size`` (align_corners=False)."""
    oh, ow = _pair(size)
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if (oh, ow) == (h, w):
        return x
    ah = bilinear_matrix(h, oh, x.dtype)
    aw = bilinear_matrix(w, ow, x.dtype)
    y = np.matmul(ah, np.matmul(x.data, aw.T))

    def bw(g):
        return (np.matmul(ah.T, np.matmul(g, aw)),)

    return make_result(y, (x,), bw, "upsample_bilinear")


def resize_nearest(arr: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize of the trailing two axes (no gradient; used for masks)."""
    oh, ow = _pair(size)
    h, w = arr.shape[-2:]
    ys = np.minimum(np.floor((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    xs = np.minimum(np.floor((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return arr[..., ys[:, None], xs[None, :]]


def resize_bilinear_array(arr: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of the trailing two axes of a plain array."""
    oh, ow = _pair(size)
    h, w = arr.shape[-2:]
    ah = bilinear_matrix(h, oh, arr.dtype)
    aw = bilinear_matrix(w, ow, arr.dtype)
    return np.matmul(ah, np.matmul(arr, aw.T))


# ----------------------------------------------------------------------------
# sequence <-> map helpers
# ----------------------------------------------------------------------------

def seq_to_map(x: Tensor, h: int, w: int) -> Tensor:
    """(B, h*w, C) -> (B, C, h, w)."""
    b, n, c = x.shape
    if n != h * w:
        raise ShapeError(f"sequence length {n} != {h}x{w}")
    return x.permute(0, 2, 1).reshape(b, c, h, w)


def map_to_seq(x: Tensor) -> Tensor:
    """(B, C, h, w) -> (B, h*w, C)."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).permute(0, 2, 1)
