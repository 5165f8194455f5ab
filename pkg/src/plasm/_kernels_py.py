"""Pure-numpy reference versions of the convolution kernels.

These mirror the compiled ``_kernels`` extension function for function and are
used whenever the extension is unavailable (or ``PLASM_KERNELS=python``).
Column layout everywhere is ``(N, C*k*k, Ho*Wo)`` with rows ordered
``(channel, ki, kj)``.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = np.ascontiguousarray(x)
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * k * k, ho * wo)


def col2im(cols, c, h, w, k, stride, pad):
    n = cols.shape[0]
    ho, wo = out_size(h, k, stride, pad), out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def dwconv_forward(x, w, pad):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            y += w[None, :, ki, kj, None, None] * xp[:, :, ki:ki + ho, kj:kj + wo]
    return y


def dwconv_backward(x, w, gy, pad):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho, wo = gy.shape[2], gy.shape[3]
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for ki in range(k):
        for kj in range(k):
            window = xp[:, :, ki:ki + ho, kj:kj + wo]
            gw[:, ki, kj] = np.einsum("nchw,nchw->c", gy, window)
            gxp[:, :, ki:ki + ho, kj:kj + wo] += w[None, :, ki, kj, None, None] * gy
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wd]), gw


def gn_act_forward(x, gamma, beta, groups, eps, slope):
    n, c = x.shape[:2]
    xg = x.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = (1.0 / np.sqrt(var + x.dtype.type(eps))).astype(x.dtype)
    xhat = (xc * inv).reshape(x.shape)
    pre = xhat * gamma.reshape(1, c, *([1] * (x.ndim - 2))) + beta.reshape(1, c, *([1] * (x.ndim - 2)))
    y = pre if slope == 1.0 else np.where(pre > 0, pre, pre * x.dtype.type(slope))
    return y, xhat, inv.reshape(n, groups)


def gn_act_backward(gy, xhat, inv, gamma, beta, groups, slope):
    n, c = gy.shape[:2]
    bshape = (1, c) + (1,) * (gy.ndim - 2)
    gm = gamma.reshape(bshape)
    if slope == 1.0:
        dp = gy
    else:
        pre = xhat * gm + beta.reshape(bshape)
        dp = np.where(pre > 0, gy, gy * gy.dtype.type(slope))
    axes = (0,) + tuple(range(2, gy.ndim))
    ggamma = (dp * xhat).sum(axis=axes)
    gbeta = dp.sum(axis=axes)
    dxh = (dp * gm).reshape(n, groups, -1)
    xh = xhat.reshape(n, groups, -1)
    gx = inv.reshape(n, groups, 1) * (dxh - dxh.mean(axis=2, keepdims=True)
                                      - xh * (dxh * xh).mean(axis=2, keepdims=True))
    return gx.reshape(gy.shape), ggamma, gbeta
