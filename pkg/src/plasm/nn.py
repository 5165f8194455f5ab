"""Convolutional layers on top of :mod:`plasm.tensor`.

Functional primitives (``conv2d``, ``dwconv2d``, ``conv_transpose2d``,
``group_norm``, ``global_avg_pool``, ``sparse_conv2d``) are single graph nodes
backed by :mod:`plasm.kernels`. The module classes hold parameters under stable
dotted names, which double as checkpoint keys.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import LEAKY_SLOPE, ShapeError, Tensor, _make, leaky_relu, mul, reduce_mean

GN_EPS = 1e-5


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# functional ------------------------------------------------------------------

_COL_BUDGET = 4 << 20  # bytes of im2col buffer per chunk


def _chunks(n, item_bytes):
    step = max(1, _COL_BUDGET // max(1, item_bytes))
    return [(i, min(n, i + step)) for i in range(0, n, step)]


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """Dense cross-correlation, weight ``(Cout, Cin, k, k)``, NCHW input.

    im2col buffers are built per batch chunk and rebuilt in the backward pass
    rather than kept alive between the two.
    """
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci} (kernel {k}x{k2})")
    pad = k // 2 if padding is None else padding
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    pointwise = k == 1 and stride == 1 and pad == 0
    xd = x.data
    w2 = weight.data.reshape(co, ci * k * k)
    if pointwise:
        y = np.matmul(w2, xd.reshape(n, c, h * w))
    else:
        y = np.empty((n, co, ho * wo), dtype=xd.dtype)
        for s, e in _chunks(n, ci * k * k * ho * wo * xd.itemsize):
            np.matmul(w2, kernels.im2col(xd[s:e], k, stride, pad), out=y[s:e])
    if bias is not None:
        y += bias.data[:, None]
    y = y.reshape(n, co, ho, wo)

    def backward(g):
        g2 = g.reshape(n, co, ho * wo)
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        if pointwise:
            x2 = xd.reshape(n, c, h * w)
            gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            gx = np.matmul(w2.T, g2).reshape(x.shape) if x.requires_grad else None
            return gx, gw, gb
        gw = np.zeros((co, ci * k * k), dtype=xd.dtype)
        gx = np.empty_like(xd) if x.requires_grad else None
        for s, e in _chunks(n, ci * k * k * ho * wo * xd.itemsize):
            cols = kernels.im2col(xd[s:e], k, stride, pad)
            gw += np.matmul(g2[s:e], cols.transpose(0, 2, 1)).sum(axis=0)
            if gx is not None:
                gx[s:e] = kernels.col2im(np.matmul(w2.T, g2[s:e]), c, h, w, k, stride, pad)
        return gx, gw.reshape(weight.shape), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, backward)


def dwconv2d(x, weight, bias=None):
    """Depthwise (per-channel) same-padded convolution, weight ``(C, 1, k, k)``."""
    n, c, h, w = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"dwconv2d: weight {weight.shape} does not match {c} channels")
    k = weight.shape[-1]
    pad = k // 2
    w3 = weight.data.reshape(c, k, k)
    y = kernels.dwconv_forward(x.data, w3, pad)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def backward(g):
        gx, gw = kernels.dwconv_backward(x.data, w3, g, pad)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw.reshape(weight.shape), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, backward)


def conv_transpose2d(x, weight, bias=None, stride=1, padding=None, output_padding=None):
    """Transposed convolution, weight ``(Cin, Cout, k, k)``.

    Exactly the adjoint of ``conv2d`` with the same weight and geometry; the
    output padding defaults to ``stride - 1`` so stride 2 doubles H and W.
    """
    n, c, h, w = x.shape
    ci, co, k, _ = weight.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    pad = k // 2 if padding is None else padding
    op = stride - 1 if output_padding is None else output_padding
    if op >= stride and op > 0:
        raise ShapeError("output_padding must be smaller than stride")
    ho = (h - 1) * stride - 2 * pad + k + op
    wo = (w - 1) * stride - 2 * pad + k + op
    xd = x.data
    x2 = xd.reshape(n, c, h * w)
    w2 = weight.data.reshape(ci, co * k * k)
    w2t = np.ascontiguousarray(w2.T)
    y = np.empty((n, co, ho, wo), dtype=xd.dtype)
    chunks = _chunks(n, co * k * k * h * w * xd.itemsize)
    for s, e in chunks:
        y[s:e] = kernels.col2im(np.matmul(w2t, x2[s:e]), co, ho, wo, k, stride, pad)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gw = np.zeros((ci, co * k * k), dtype=xd.dtype)
        gx = np.empty_like(x2) if x.requires_grad else None
        for s, e in chunks:
            gcols = kernels.im2col(g[s:e], k, stride, pad)
            gw += np.matmul(x2[s:e], gcols.transpose(0, 2, 1)).sum(axis=0)
            if gx is not None:
                np.matmul(w2, gcols, out=gx[s:e])
        return (None if gx is None else gx.reshape(x.shape)), gw.reshape(weight.shape), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, backward)


def group_norm(x, num_groups, gamma, beta, eps=GN_EPS, slope=1.0):
    """Group normalization with affine, optionally fused with a leaky ReLU.

    ``slope=1`` is plain group norm; ``slope=LEAKY_SLOPE`` applies the
    activation in the same pass.
    """
    c = x.shape[1]
    if c % num_groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm: affine parameters must have one entry per channel")
    y, xhat, inv = kernels.gn_act_forward(x.data, gamma.data, beta.data, num_groups, eps, slope)

    def backward(g):
        return kernels.gn_act_backward(g, xhat, inv, gamma.data, beta.data, num_groups, slope)

    return _make(y, (x, gamma, beta), backward)


def group_norm_lrelu(x, num_groups, gamma, beta, eps=GN_EPS):
    return group_norm(x, num_groups, gamma, beta, eps, slope=LEAKY_SLOPE)


def global_avg_pool(x):
    """Spatial mean per channel: ``(B, C, H, W) -> (B, C, 1, 1)``."""
    return reduce_mean(x, axis=(2, 3), keepdims=True)


@dataclass
class VisibilityMask:
    """Per-pixel visibility, ``mask[b, 0, i, j]`` true where the pixel is kept."""

    mask: np.ndarray
    level: int = 0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 4 or self.mask.shape[1] != 1:
            raise ShapeError(f"visibility mask must be (B, 1, H, W), got {self.mask.shape}")

    @classmethod
    def all_visible(cls, batch, h, w):
        return cls(np.ones((batch, 1, h, w), dtype=bool))

    def downsample(self, stride):
        if stride == 1:
            return self
        # output (i, j) is centred on input (stride*i, stride*j)
        return VisibilityMask(np.ascontiguousarray(self.mask[:, :, ::stride, ::stride]), self.level + 1)

    def as_float(self, dtype):
        return Tensor(self.mask.astype(dtype), dtype=dtype)

    @property
    def visible_count(self):
        return int(self.mask.sum())


def sparse_conv2d(x, weight, bias, mask, stride=1):
    """Submanifold convolution restricted to visible pixels.

    Masked inputs contribute nothing, and outputs at invisible positions are
    exactly zero (bias included). The output mask is the input mask sampled at
    each output's centre. With an all-visible mask this equals ``conv2d`` bit
    for bit.
    """
    if mask.mask.shape[0] != x.shape[0] or mask.mask.shape[2:] != x.shape[2:]:
        raise ShapeError(f"mask {mask.mask.shape} does not match input {x.shape}")
    out_mask = mask.downsample(stride)
    y = conv2d(mul(x, mask.as_float(x.dtype)), weight, bias, stride=stride)
    return mul(y, out_mask.as_float(x.dtype)), out_mask


def kaiming_init(shape, rng, fan_mode="fan_in", dtype=np.float32):
    """Normal(0, sqrt(2 / fan)) weights."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan = (shape[1] if fan_mode == "fan_in" else shape[0]) * receptive
    return rng.normal(shape, std=np.sqrt(2.0 / fan), dtype=dtype)


# modules ---------------------------------------------------------------------

class Module:
    """Minimal parameter container; attribute order fixes canonical names."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
                p.data = np.ascontiguousarray(arr, dtype=p.dtype)

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = []
        for i, m in enumerate(modules):
            self._children[str(i)] = m
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _param(data):
    return Tensor(data, requires_grad=True, dtype=data.dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, groups=1, dtype=np.float32):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ShapeError(f"channels ({in_ch}, {out_ch}) not divisible by groups={groups}")
        if groups not in (1, in_ch) or (groups > 1 and (out_ch != in_ch or stride != 1)):
            raise ShapeError("only dense or stride-1 depthwise convolutions are supported")
        if kernel_size % 2 == 0:
            raise ShapeError("kernel size must be odd")
        self.stride = stride
        self.groups = groups
        shape = (out_ch, in_ch // groups, kernel_size, kernel_size)
        self.weight = _param(kaiming_init(shape, rng, dtype=dtype))
        self.bias = _param(np.zeros(out_ch, dtype=dtype))

    def forward(self, x):
        if self.groups > 1:
            return dwconv2d(x, self.weight, self.bias)
        return conv2d(x, self.weight, self.bias, stride=self.stride)

    def forward_sparse(self, x, mask):
        return sparse_conv2d(x, self.weight, self.bias, mask, stride=self.stride)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, rng, stride=1, dtype=np.float32):
        super().__init__()
        self.stride = stride
        shape = (in_ch, out_ch, kernel_size, kernel_size)
        self.weight = _param(kaiming_init(shape, rng, dtype=dtype))
        self.bias = _param(np.zeros(out_ch, dtype=dtype))

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


def gn_groups(channels):
    return 2 if channels % 2 == 0 else 1


class GroupNorm(Module):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.num_groups = gn_groups(channels)
        self.weight = _param(np.ones(channels, dtype=dtype))
        self.bias = _param(np.zeros(channels, dtype=dtype))

    def forward(self, x, slope=1.0):
        return group_norm(x, self.num_groups, self.weight, self.bias, slope=slope)


class ConvNeXtBlock(Module):
    """Residual block: dw7x7 -> GN -> 1x1 (C->4C) -> leaky ReLU -> 1x1 (4C->C)."""

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        self.dwconv = Conv2d(channels, channels, 7, rng.derive(0), groups=channels, dtype=dtype)
        self.norm = GroupNorm(channels, dtype=dtype)
        self.expand = Conv2d(channels, 4 * channels, 1, rng.derive(1), dtype=dtype)
        self.project = Conv2d(4 * channels, channels, 1, rng.derive(2), dtype=dtype)

    def forward(self, z):
        h = self.project(leaky_relu(self.expand(self.norm(self.dwconv(z)))))
        return z + h


class PlainConvBlock(Module):
    """Ablation stand-in for ConvNeXt: residual 3x3 conv -> GN -> leaky ReLU."""

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, rng.derive(0), dtype=dtype)
        self.norm = GroupNorm(channels, dtype=dtype)

    def forward(self, z):
        return z + leaky_relu(self.norm(self.conv(z)))


def make_block(kind, channels, rng, dtype=np.float32):
    if kind == "convnext":
        return ConvNeXtBlock(channels, rng, dtype=dtype)
    if kind == "conv":
        return PlainConvBlock(channels, rng, dtype=dtype)
    raise ValueError(f"unknown block kind {kind!r}")
