"""Pretraining-time masking: pixel masking of input frames and the spatial
masking (SM) attention that replaces the translator during pretraining."""

import math
from decimal import Decimal

import numpy as np

from .model import Decoder, Encoder, frames_to_concat
from .nn import Conv2d, Module, VisibilityMask, global_avg_pool
from .tensor import Tensor, masked_fill, matmul, reshape, scale, softmax


def ratio_count(ratio, total):
    """``floor(ratio * total)`` computed on the decimal literal of ``ratio``.

    Avoids binary round-off such as ``0.3 * 10 == 2.9999999999999996``.
    """
    return int(math.floor(Decimal(repr(float(ratio))) * int(total)))


def mask_input_frames(frames, ratio, rng):
    """Zero exactly ``floor(ratio*H*W)`` pixels of every frame.

    Pixels are drawn without replacement from a stream derived from
    (clip index, frame index) and shared across channels. Returns the masked
    frames and a :class:`VisibilityMask` over the ``B*T`` frames.
    """
    data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    b, t, c, h, w = data.shape
    n_mask = ratio_count(ratio, h * w)
    visible = np.ones((b, t, h * w), dtype=bool)
    if n_mask:
        for i in range(b):
            for j in range(t):
                visible[i, j, rng.derive(i, j).permutation(h * w)[:n_mask]] = False
    visible = visible.reshape(b, t, 1, h, w)
    masked = np.where(visible, data, 0).astype(data.dtype)
    return Tensor(masked, dtype=data.dtype), VisibilityMask(visible.reshape(b * t, 1, h, w))


def top_score_mask(scores, count):
    """Boolean mask of the ``count`` largest entries of each ``(C, C)`` matrix.

    Ties are broken by row-major position (earlier entries are masked first).
    """
    n = scores.shape[0]
    flat = scores.reshape(n, -1)
    mask = np.zeros(flat.shape, dtype=bool)
    if count:
        order = np.argsort(-flat, axis=1, kind="stable")[:, :count]
        np.put_along_axis(mask, order, True, axis=1)
    return mask.reshape(scores.shape)


class SpatialMasking(Module):
    """Per-frame channel attention with the top ``floor(r*C^2)`` scores masked."""

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.query = Conv2d(channels, channels, 1, rng.derive(0), dtype=dtype)
        self.key = Conv2d(channels, channels, 1, rng.derive(1), dtype=dtype)
        self.value = Conv2d(channels, channels, 3, rng.derive(2), groups=channels, dtype=dtype)
        self.last = None

    def attention(self, s_hat, ratio):
        n, c = s_hat.shape[:2]
        q = reshape(self.query(global_avg_pool(s_hat)), (n, c, 1))
        k = reshape(self.key(global_avg_pool(s_hat)), (n, 1, c))
        scores = scale(matmul(q, k), 1.0 / math.sqrt(c))
        masked = top_score_mask(scores.data, ratio_count(ratio, c * c))
        probs = softmax(masked_fill(scores, masked, -np.inf), axis=2)
        self.last = {"scores": scores.data, "masked": masked, "probs": probs.data}
        return probs

    def forward(self, s_hat, ratio):
        """Per-frame features ``(B*T, C~, H', W')`` -> same shape."""
        n, c, h, w = s_hat.shape
        probs = self.attention(s_hat, ratio)
        v = reshape(self.value(s_hat), (n, c, h * w))
        return reshape(matmul(probs, v), (n, c, h, w))


class PretrainModel(Module):
    """Encoder (sparse convs on masked frames) -> SM -> decoder reconstruction."""

    def __init__(self, cfg, rng, dtype=np.float32, use_sm=True):
        super().__init__()
        self.cfg = cfg
        self.use_sm = use_sm
        self.encoder = Encoder(cfg, rng.derive(1), dtype)
        self.decoder = Decoder(cfg, rng.derive(3), dtype)
        self.sm = SpatialMasking(cfg.enc_channels, rng.derive(4), dtype)

    def forward(self, frames, rng, input_ratio=None, sm_ratio=None):
        cfg = self.cfg
        input_ratio = cfg.input_mask_ratio if input_ratio is None else input_ratio
        sm_ratio = cfg.sm_ratio if sm_ratio is None else sm_ratio
        b, t = frames.shape[:2]
        masked, vis = mask_input_frames(frames, input_ratio, rng)
        s_hat = self.encoder.forward_frames(masked, vis)
        s_tilde = self.sm(s_hat, sm_ratio) if self.use_sm else s_hat
        return self.decoder(frames_to_concat(s_tilde, b, t), t)
