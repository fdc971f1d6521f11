# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im with padding and dilation handled in-loop (no padded copy)."""
import numpy as np
cimport cython

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _first_valid(Py_ssize_t offset, Py_ssize_t stride) noexcept nogil:
    # smallest o >= 0 with o * stride + offset >= 0
    if offset >= 0:
        return 0
    return (-offset + stride - 1) // stride


cdef inline Py_ssize_t _end_valid(Py_ssize_t offset, Py_ssize_t stride, Py_ssize_t size, Py_ssize_t n_out) noexcept nogil:
    # one past the largest o < n_out with o * stride + offset < size
    cdef Py_ssize_t last = size - 1 - offset
    if last < 0:
        return 0
    last = last // stride + 1
    return last if last < n_out else n_out


cdef void _im2col(const real[:, :, :, ::1] x, real[:, :, ::1] cols,
                  int kh, int kw, int sh, int sw, int ph, int pw, int dh, int dw,
                  int ho, int wo, real pad_value) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, oy, ox, row, y0, y1, x0, x1, xoff
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef const real* src
    cdef real* dst
    for n in range(nb):
        for c in range(nc):
            for i in range(kh):
                y0 = _first_valid(i * dh - ph, sh)
                y1 = _end_valid(i * dh - ph, sh, h, ho)
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    xoff = j * dw - pw
                    x0 = _first_valid(xoff, sw)
                    x1 = _end_valid(xoff, sw, w, wo)
                    if x1 < x0:
                        x1 = x0
                    dst = &cols[n, row, 0]
                    for oy in range(ho):
                        if oy < y0 or oy >= y1:
                            for ox in range(wo):
                                dst[oy * wo + ox] = pad_value
                            continue
                        src = &x[n, c, oy * sh - ph + i * dh, 0]
                        for ox in range(x0):
                            dst[oy * wo + ox] = pad_value
                        if sw == 1:
                            for ox in range(x0, x1):
                                dst[oy * wo + ox] = src[ox + xoff]
                        else:
                            for ox in range(x0, x1):
                                dst[oy * wo + ox] = src[ox * sw + xoff]
                        for ox in range(x1, wo):
                            dst[oy * wo + ox] = pad_value


cdef void _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] out,
                  int kh, int kw, int sh, int sw, int ph, int pw, int dh, int dw,
                  int ho, int wo) noexcept nogil:
    cdef Py_ssize_t n, c, i, j, oy, ox, row, y0, y1, x0, x1, xoff
    cdef Py_ssize_t nb = out.shape[0], nc = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef const real* src
    cdef real* dst
    for n in range(nb):
        for c in range(nc):
            for i in range(kh):
                y0 = _first_valid(i * dh - ph, sh)
                y1 = _end_valid(i * dh - ph, sh, h, ho)
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    xoff = j * dw - pw
                    x0 = _first_valid(xoff, sw)
                    x1 = _end_valid(xoff, sw, w, wo)
                    src = &cols[n, row, 0]
                    for oy in range(y0, y1):
                        dst = &out[n, c, oy * sh - ph + i * dh, 0]
                        if sw == 1:
                            for ox in range(x0, x1):
                                dst[ox + xoff] += src[oy * wo + ox]
                        else:
                            for ox in range(x0, x1):
                                dst[ox * sw + xoff] += src[oy * wo + ox]


def _out_size(size, k, s, p, d):
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def im2col(x, int kh, int kw, int sh, int sw, int ph, int pw, int dh, int dw, pad_value=0.0):
    x = np.ascontiguousarray(x)
    nb, nc, h, w = x.shape
    cdef int ho = _out_size(h, kh, sh, ph, dh)
    cdef int wo = _out_size(w, kw, sw, pw, dw)
    cols = np.empty((nb, nc * kh * kw, ho * wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo, <float>pad_value)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo, <double>pad_value)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im(cols, shape, int kh, int kw, int sh, int sw, int ph, int pw, int dh, int dw):
    cols = np.ascontiguousarray(cols)
    nb, nc, h, w = shape
    cdef int ho = _out_size(h, kh, sh, ph, dh)
    cdef int wo = _out_size(w, kw, sw, pw, dw)
    cols = cols.reshape(nb, nc * kh * kw, ho * wo)
    out = np.zeros((nb, nc, h, w), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, out, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
    elif cols.dtype == np.float64:
        _col2im[double](cols, out, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
