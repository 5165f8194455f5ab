"""Encoder, U-shaped pair-wise layer attention translator, and decoder."""

import math

import numpy as np

from .nn import (
    Conv2d,
    ConvTranspose2d,
    GroupNorm,
    Module,
    ModuleList,
    global_avg_pool,
    make_block,
)
from .tensor import LEAKY_SLOPE, ShapeError, mul, reduce_sum, reshape, scale, softmax


def encoder_strides(depth):
    """Stride 2 at every second block: (1, 2, 1, 2, ...)."""
    return [2 if i % 2 == 1 else 1 for i in range(depth)]


class EncoderBlock(Module):
    def __init__(self, in_ch, out_ch, stride, rng, dtype):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 3, rng, stride=stride, dtype=dtype)
        self.norm = GroupNorm(out_ch, dtype=dtype)

    def forward(self, x, mask=None):
        if mask is None:
            y = self.conv(x)
        else:
            y, mask = self.conv.forward_sparse(x, mask)
        return self.norm(y, slope=LEAKY_SLOPE), mask


class Encoder(Module):
    """Per-frame conv stack; the time axis is folded into the batch."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.channels] + [cfg.enc_channels] * cfg.enc_depth
        self.blocks = ModuleList([
            EncoderBlock(widths[i], widths[i + 1], s, rng.derive(i), dtype)
            for i, s in enumerate(encoder_strides(cfg.enc_depth))
        ])

    def forward_frames(self, frames, mask=None):
        """``(B, T, C, H, W)`` -> per-frame features ``(B*T, C~, H', W')``.

        ``mask`` (a :class:`VisibilityMask` over ``B*T`` frames) switches every
        conv to its sparse form.
        """
        b, t, c, h, w = frames.shape
        if c != self.cfg.channels or (h, w) != (self.cfg.height, self.cfg.width):
            raise ShapeError(f"frames {frames.shape} do not match config "
                             f"(C={self.cfg.channels}, H={self.cfg.height}, W={self.cfg.width})")
        x = reshape(frames, (b * t, c, h, w))
        for blk in self.blocks:
            x, mask = blk(x, mask)
        return x

    def forward(self, frames, mask=None):
        b, t = frames.shape[:2]
        return frames_to_concat(self.forward_frames(frames, mask), b, t)


def frames_to_concat(feat, b, t):
    n, c, h, w = feat.shape
    return reshape(feat, (b, t * c, h, w))


def concat_to_frames(feat, t):
    b, tc, h, w = feat.shape
    if tc % t:
        raise ShapeError(f"{tc} channels do not split into {t} frames")
    return reshape(feat, (b * t, tc // t, h, w))


class DecoderBlock(Module):
    def __init__(self, ch, stride, rng, dtype):
        super().__init__()
        self.deconv = ConvTranspose2d(ch, ch, 3, rng, stride=stride, dtype=dtype)
        self.norm = GroupNorm(ch, dtype=dtype)

    def forward(self, x):
        return self.norm(self.deconv(x), slope=LEAKY_SLOPE)


class Decoder(Module):
    """Transposed-conv stack mirroring the encoder, then a linear 1x1 readout."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        strides = encoder_strides(cfg.enc_depth)[::-1]
        self.blocks = ModuleList([
            DecoderBlock(cfg.enc_channels, s, rng.derive(i), dtype) for i, s in enumerate(strides)
        ])
        self.readout = Conv2d(cfg.enc_channels, cfg.channels, 1, rng.derive(len(strides)), dtype=dtype)

    def forward(self, feat, frames):
        """``(B, frames*C~, H', W')`` -> ``(B, frames, C, H, W)``."""
        b = feat.shape[0]
        if feat.shape[1] != frames * self.cfg.enc_channels:
            raise ShapeError(f"decoder expects {frames}x{self.cfg.enc_channels} channels, got {feat.shape[1]}")
        x = concat_to_frames(feat, frames)
        for blk in self.blocks:
            x = blk(x)
        y = self.readout(x)
        return reshape(y, (b, frames) + y.shape[1:])


class PLABlock(Module):
    """Gates the value path of the previous PLA output by a per-head score.

    Query comes from the mirrored ConvNeXt output, key and value from the
    previous PLA output. Head weights are a softmax over heads scaled by the
    head count, so a single head (or equal scores) gives weight exactly 1.
    """

    def __init__(self, channels, heads, rng, block="convnext", dtype=np.float32):
        super().__init__()
        if channels % heads:
            raise ShapeError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.query = Conv2d(channels, channels, 1, rng.derive(0), dtype=dtype)
        self.key = Conv2d(channels, channels, 1, rng.derive(1), dtype=dtype)
        self.value_block = make_block(block, channels, rng.derive(2), dtype=dtype)
        self.value_dw = Conv2d(channels, channels, 3, rng.derive(3), groups=channels, dtype=dtype)
        self.last_weights = None

    def head_weights(self, z_conv, z_prev):
        b, c = z_conv.shape[:2]
        width = c // self.heads
        q = reshape(self.query(global_avg_pool(z_conv)), (b, self.heads, width))
        k = reshape(self.key(global_avg_pool(z_prev)), (b, self.heads, width))
        scores = scale(reduce_sum(mul(q, k), axis=2), 1.0 / math.sqrt(width))
        return scale(softmax(scores, axis=1), float(self.heads))

    def value(self, z_prev):
        return self.value_dw(self.value_block(z_prev))

    def forward(self, z_conv, z_prev):
        if z_conv.shape != z_prev.shape:
            raise ShapeError(f"PLA inputs differ in shape: {z_conv.shape} vs {z_prev.shape}")
        b, c, h, w = z_prev.shape
        weights = self.head_weights(z_conv, z_prev)
        self.last_weights = weights.data
        v = reshape(self.value(z_prev), (b, self.heads, c // self.heads, h, w))
        out = mul(v, reshape(weights, (b, self.heads, 1, 1, 1)))
        return reshape(out, (b, c, h, w))


class Translator(Module):
    """U-shape: N ConvNeXt blocks bottom-up, N PLA blocks top-down.

    PLA block j (1-based) pairs ConvNeXt output Z_{N-j+1} with the previous
    PLA output (the first one pairs with Z_N). 1x1 convs map T*C~ -> C^ on
    entry and C^ -> T'*C~ on exit.
    """

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        ch, n = cfg.hid_channels, cfg.trans_depth
        self.entry = Conv2d(cfg.t_in * cfg.enc_channels, ch, 1, rng.derive(0), dtype=dtype)
        self.down = ModuleList([make_block(cfg.block, ch, rng.derive(1, i), dtype) for i in range(n)])
        if cfg.use_pla:
            self.up = ModuleList([PLABlock(ch, cfg.heads, rng.derive(2, j), cfg.block, dtype) for j in range(n)])
        else:
            self.up = ModuleList([make_block(cfg.block, ch, rng.derive(2, j), dtype) for j in range(n)])
        self.exit = Conv2d(ch, cfg.t_out * cfg.enc_channels, 1, rng.derive(3), dtype=dtype)

    def forward(self, s):
        z = [self.entry(s)]
        for blk in self.down:
            z.append(blk(z[-1]))
        n = len(self.down)
        z_bar = z[n]
        for j, blk in enumerate(self.up, start=1):
            z_bar = blk(z[n - j + 1], z_bar) if self.cfg.use_pla else blk(z_bar)
        return self.exit(z_bar)


class VideoPredictor(Module):
    """Encoder -> translator -> decoder, mapping T input frames to T' predictions."""

    def __init__(self, cfg, rng, dtype=np.float32, encoder=None, decoder=None):
        super().__init__()
        self.cfg = cfg
        self.encoder = encoder if encoder is not None else Encoder(cfg, rng.derive(1), dtype)
        self.translator = Translator(cfg, rng.derive(2), dtype)
        self.decoder = decoder if decoder is not None else Decoder(cfg, rng.derive(3), dtype)

    def forward(self, frames):
        if frames.shape[1] != self.cfg.t_in:
            raise ShapeError(f"expected {self.cfg.t_in} input frames, got {frames.shape[1]}")
        s = self.encoder(frames)
        return self.decoder(self.translator(s), self.cfg.t_out)
