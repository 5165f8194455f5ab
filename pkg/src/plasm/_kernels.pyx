# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (im2col/col2im and depthwise conv).

Same signatures and column layout as ``plasm._kernels_py``. Loops are
sequential so results are reproducible run to run.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt

cnp.import_array()


def out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


cdef inline void _col_range(Py_ssize_t kj, Py_ssize_t stride, Py_ssize_t pad,
                            Py_ssize_t W, Py_ssize_t wo,
                            Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns ow with 0 <= ow*stride + kj - pad < W
    cdef Py_ssize_t a = 0, b
    if pad > kj:
        a = (pad - kj + stride - 1) // stride
    b = (W - 1 + pad - kj) // stride + 1 if W - 1 + pad - kj >= 0 else 0
    if b > wo:
        b = wo
    if a > b:
        a = b
    lo[0] = a
    hi[0] = b


cdef void _im2col(const floating[:, :, :, ::1] x, floating[:, :, ::1] cols,
                  Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n, c, ki, kj, oh, ow, ih, row, base, lo, hi, off
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    for n in range(N):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    _col_range(kj, stride, pad, W, wo, &lo, &hi)
                    off = kj - pad
                    for oh in range(ho):
                        ih = oh * stride + ki - pad
                        base = oh * wo
                        if ih < 0 or ih >= H:
                            for ow in range(wo):
                                cols[n, row, base + ow] = 0
                            continue
                        for ow in range(lo):
                            cols[n, row, base + ow] = 0
                        if stride == 1:
                            for ow in range(lo, hi):
                                cols[n, row, base + ow] = x[n, c, ih, ow + off]
                        else:
                            for ow in range(lo, hi):
                                cols[n, row, base + ow] = x[n, c, ih, ow * stride + off]
                        for ow in range(hi, wo):
                            cols[n, row, base + ow] = 0


def im2col(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = out_size(x.shape[2], k, stride, pad)
    cdef Py_ssize_t wo = out_size(x.shape[3], k, stride, pad)
    cols = np.empty((n, c * k * k, ho * wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, k, stride, pad, ho, wo)
    else:
        _im2col[double](x, cols, k, stride, pad, ho, wo)
    return cols


cdef void _col2im(const floating[:, :, ::1] cols, floating[:, :, :, ::1] x,
                  Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad,
                  Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n, c, ki, kj, oh, ow, ih, row, base, lo, hi, off
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    for n in range(N):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    _col_range(kj, stride, pad, W, wo, &lo, &hi)
                    off = kj - pad
                    for oh in range(ho):
                        ih = oh * stride + ki - pad
                        if ih < 0 or ih >= H:
                            continue
                        base = oh * wo
                        if stride == 1:
                            for ow in range(lo, hi):
                                x[n, c, ih, ow + off] += cols[n, row, base + ow]
                        else:
                            for ow in range(lo, hi):
                                x[n, c, ih, ow * stride + off] += cols[n, row, base + ow]


def col2im(cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cols = np.ascontiguousarray(cols)
    cdef Py_ssize_t ho = out_size(h, k, stride, pad)
    cdef Py_ssize_t wo = out_size(w, k, stride, pad)
    x = np.zeros((cols.shape[0], c, h, w), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, x, k, stride, pad, ho, wo)
    else:
        _col2im[double](cols, x, k, stride, pad, ho, wo)
    return x


cdef void _dw_fwd(const floating[:, :, :, ::1] x, const floating[:, :, ::1] w,
                  floating[:, :, :, ::1] y, Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t n, c, ki, kj, oh, ow, ih, ow0, ow1
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t k = w.shape[2], HO = y.shape[2], WO = y.shape[3]
    cdef floating wv
    for n in range(N):
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    wv = w[c, ki, kj]
                    # valid output columns for this tap: 0 <= ow + kj - pad < W
                    ow0 = pad - kj if pad > kj else 0
                    ow1 = W + pad - kj if W + pad - kj < WO else WO
                    for oh in range(HO):
                        ih = oh + ki - pad
                        if ih < 0 or ih >= H:
                            continue
                        for ow in range(ow0, ow1):
                            y[n, c, oh, ow] += wv * x[n, c, ih, ow + kj - pad]


def dwconv_forward(x, w, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    cdef Py_ssize_t k = w.shape[2]
    y = np.zeros((x.shape[0], x.shape[1], x.shape[2] + 2 * pad - k + 1,
                  x.shape[3] + 2 * pad - k + 1), dtype=x.dtype)
    if x.dtype == np.float32:
        _dw_fwd[float](x, w, y, pad)
    else:
        _dw_fwd[double](x, w, y, pad)
    return y


cdef void _dw_bwd(const floating[:, :, :, ::1] x, const floating[:, :, ::1] w,
                  const floating[:, :, :, ::1] gy, floating[:, :, :, ::1] gx,
                  floating[:, :, ::1] gw, Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t n, c, ki, kj, oh, ow, ih, ow0, ow1
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t k = w.shape[2], HO = gy.shape[2], WO = gy.shape[3]
    cdef floating wv, acc
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                wv = w[c, ki, kj]
                ow0 = pad - kj if pad > kj else 0
                ow1 = W + pad - kj if W + pad - kj < WO else WO
                acc = 0
                for n in range(N):
                    for oh in range(HO):
                        ih = oh + ki - pad
                        if ih < 0 or ih >= H:
                            continue
                        for ow in range(ow0, ow1):
                            acc += gy[n, c, oh, ow] * x[n, c, ih, ow + kj - pad]
                            gx[n, c, ih, ow + kj - pad] += wv * gy[n, c, oh, ow]
                gw[c, ki, kj] = acc


def dwconv_backward(x, w, gy, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    gy = np.ascontiguousarray(gy)
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    if x.dtype == np.float32:
        _dw_bwd[float](x, w, gy, gx, gw, pad)
    else:
        _dw_bwd[double](x, w, gy, gx, gw, pad)
    return gx, gw


cdef void _gn_fwd(const floating[:, :, ::1] x, const floating[::1] gamma,
                  const floating[::1] beta, floating[:, :, ::1] y,
                  floating[:, :, ::1] xhat, floating[:, ::1] inv,
                  Py_ssize_t groups, double eps, double slope) noexcept nogil:
    # x is (N, C, HW); statistics per (sample, group), accumulated in double
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t cg = C // groups, n, g, c, i
    cdef double s, d, mu, iv, cnt = <double>(cg * L)
    cdef floating fmu, fiv, gm, bt, v
    for n in range(N):
        for g in range(groups):
            s = 0
            for c in range(g * cg, (g + 1) * cg):
                for i in range(L):
                    s += x[n, c, i]
            mu = s / cnt
            s = 0
            for c in range(g * cg, (g + 1) * cg):
                for i in range(L):
                    d = x[n, c, i] - mu
                    s += d * d
            iv = 1.0 / sqrt(s / cnt + eps)
            inv[n, g] = <floating>iv
            fmu = <floating>mu
            fiv = <floating>iv
            for c in range(g * cg, (g + 1) * cg):
                gm = gamma[c]
                bt = beta[c]
                for i in range(L):
                    v = (x[n, c, i] - fmu) * fiv
                    xhat[n, c, i] = v
                    v = v * gm + bt
                    y[n, c, i] = v if v > 0 else v * <floating>slope


def gn_act_forward(x, gamma, beta, Py_ssize_t groups, double eps, double slope):
    """Group norm + affine + leaky ReLU (slope 1 means no activation).

    Returns ``(y, xhat, inv_std)``.
    """
    x = np.ascontiguousarray(x)
    shape = x.shape
    x3 = x.reshape(shape[0], shape[1], -1)
    y = np.empty_like(x3)
    xhat = np.empty_like(x3)
    inv = np.empty((shape[0], groups), dtype=x.dtype)
    gamma = np.ascontiguousarray(gamma, dtype=x.dtype)
    beta = np.ascontiguousarray(beta, dtype=x.dtype)
    if x.dtype == np.float32:
        _gn_fwd[float](x3, gamma, beta, y, xhat, inv, groups, eps, slope)
    else:
        _gn_fwd[double](x3, gamma, beta, y, xhat, inv, groups, eps, slope)
    return y.reshape(shape), xhat.reshape(shape), inv


cdef void _gn_bwd(const floating[:, :, ::1] gy, const floating[:, :, ::1] xhat,
                  const floating[:, ::1] inv, const floating[::1] gamma,
                  const floating[::1] beta, floating[:, :, ::1] gx,
                  double[::1] ggamma, double[::1] gbeta,
                  Py_ssize_t groups, double slope) noexcept nogil:
    cdef Py_ssize_t N = gy.shape[0], C = gy.shape[1], L = gy.shape[2]
    cdef Py_ssize_t cg = C // groups, n, g, c, i
    cdef double s1, s2, cnt = <double>(cg * L), sg, sb
    cdef floating pre, dp, dxh, gm, bt, fm1, fm2, fiv
    for n in range(N):
        for g in range(groups):
            s1 = 0
            s2 = 0
            for c in range(g * cg, (g + 1) * cg):
                gm = gamma[c]
                bt = beta[c]
                sg = 0
                sb = 0
                for i in range(L):
                    pre = xhat[n, c, i] * gm + bt
                    dp = gy[n, c, i] if pre > 0 else gy[n, c, i] * <floating>slope
                    sg += dp * xhat[n, c, i]
                    sb += dp
                    dxh = dp * gm
                    gx[n, c, i] = dxh
                    s1 += dxh
                    s2 += dxh * xhat[n, c, i]
                ggamma[c] += sg
                gbeta[c] += sb
            fm1 = <floating>(s1 / cnt)
            fm2 = <floating>(s2 / cnt)
            fiv = inv[n, g]
            for c in range(g * cg, (g + 1) * cg):
                for i in range(L):
                    gx[n, c, i] = fiv * (gx[n, c, i] - fm1 - xhat[n, c, i] * fm2)


def gn_act_backward(gy, xhat, inv, gamma, beta, Py_ssize_t groups, double slope):
    """Returns ``(gx, ggamma, gbeta)`` for :func:`gn_act_forward`."""
    gy = np.ascontiguousarray(gy)
    shape = gy.shape
    g3 = gy.reshape(shape[0], shape[1], -1)
    x3 = np.ascontiguousarray(xhat).reshape(g3.shape)
    gx = np.empty_like(g3)
    ggamma = np.zeros(shape[1], dtype=np.float64)
    gbeta = np.zeros(shape[1], dtype=np.float64)
    gamma = np.ascontiguousarray(gamma, dtype=gy.dtype)
    beta = np.ascontiguousarray(beta, dtype=gy.dtype)
    inv = np.ascontiguousarray(inv, dtype=gy.dtype)
    if gy.dtype == np.float32:
        _gn_bwd[float](g3, x3, inv, gamma, beta, gx, ggamma, gbeta, groups, slope)
    else:
        _gn_bwd[double](g3, x3, inv, gamma, beta, gx, ggamma, gbeta, groups, slope)
    return gx.reshape(shape), ggamma.astype(gy.dtype), gbeta.astype(gy.dtype)
