"""Frame-quality metrics: MSE, MAE, SSIM, PSNR, and brute-force oracles.

Pixels are expected in [0, 1]. MSE and MAE use the frame-sum convention: the
error is summed over C x H x W and averaged over clips and frames.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0
C1 = (K1 * DATA_RANGE) ** 2
C2 = (K2 * DATA_RANGE) ** 2

CONVENTION = ("# mse/mae: per-frame sum over C*H*W, mean over clips and frames; pixels in [0,1]; "
              "ssim: 11x11 gaussian sigma=1.5, K1=0.01, K2=0.03, L=1, channel mean; "
              "psnr: 10*log10(1/per-pixel mse), mean over frames")


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    if y.ndim < 3:
        raise ValueError(f"expected (..., C, H, W) frames, got shape {y.shape}")
    return y, y_hat


def _frames(a):
    return a.reshape(-1, *a.shape[-3:])


def mse(y, y_hat):
    y, y_hat = _pair(y, y_hat)
    d = _frames(y - y_hat)
    return float((d * d).sum() / d.shape[0])


def mae(y, y_hat):
    y, y_hat = _pair(y, y_hat)
    d = _frames(y - y_hat)
    return float(np.abs(d).sum() / d.shape[0])


def gaussian_window(size=WINDOW, sigma=SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter(img, g):
    """Separable valid-mode filtering of a 2-d image."""
    k = g.shape[0]
    rows = sliding_window_view(img, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def _ssim_plane(a, b, g):
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    saa = _filter(a * a, g) - mu_a * mu_a
    sbb = _filter(b * b, g) - mu_b * mu_b
    sab = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * sab + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (saa + sbb + C2)
    return float(np.mean(num / den))


def _planes(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame[None]
    if frame.ndim == 3:
        return frame
    raise ValueError(f"ssim takes one frame (H, W) or (C, H, W), got shape {frame.shape}")


def ssim(frame, frame_hat):
    """SSIM of one frame; multi-channel frames give the channel mean."""
    a, b = _planes(frame), _planes(frame_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < WINDOW:
        raise ValueError(f"frame {a.shape[-2:]} is smaller than the {WINDOW}x{WINDOW} window")
    g = gaussian_window()
    return float(np.mean([_ssim_plane(pa, pb, g) for pa, pb in zip(a, b)]))


def ssim_sequence(y, y_hat):
    """Mean SSIM over every frame of ``(..., C, H, W)`` arrays."""
    y, y_hat = _pair(y, y_hat)
    return float(np.mean([ssim(a, b) for a, b in zip(_frames(y), _frames(y_hat))]))


def ssim_bruteforce(frame, frame_hat):
    """Direct per-pixel SSIM with explicit 11x11 weighted sums; slow, for testing."""
    a, b = _planes(frame), _planes(frame_hat)
    g = gaussian_window()
    w = np.outer(g, g)
    vals = []
    for pa, pb in zip(a, b):
        h, wd = pa.shape
        total, count = 0.0, 0
        for i in range(h - WINDOW + 1):
            for j in range(wd - WINDOW + 1):
                xa = pa[i:i + WINDOW, j:j + WINDOW]
                xb = pb[i:i + WINDOW, j:j + WINDOW]
                ma, mb = (w * xa).sum(), (w * xb).sum()
                va = (w * (xa - ma) ** 2).sum()
                vb = (w * (xb - mb) ** 2).sum()
                cab = (w * (xa - ma) * (xb - mb)).sum()
                total += ((2 * ma * mb + C1) * (2 * cab + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
                count += 1
        vals.append(total / count)
    return float(np.mean(vals))


def psnr_from_mse(mse_per_pixel):
    if mse_per_pixel == 0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE * DATA_RANGE / mse_per_pixel)


def psnr(y, y_hat):
    """Per-frame PSNR (dB) averaged over frames; ``inf`` if any frame matches exactly."""
    y, y_hat = _pair(y, y_hat)
    d = _frames(y - y_hat)
    per_pixel = (d * d).reshape(d.shape[0], -1).mean(axis=1)
    return float(np.mean([psnr_from_mse(float(m)) for m in per_pixel]))


@dataclass
class MetricReport:
    mse: float
    mae: float
    ssim: float
    psnr_db: float
    per_frame: list = None

    def to_text(self):
        lines = [CONVENTION]
        for key in ("mse", "mae", "ssim", "psnr_db"):
            lines.append(f"{key}\t{getattr(self, key)!r}")
        for t, row in enumerate(self.per_frame or [], start=1):
            for key in ("mse", "mae", "ssim", "psnr_db"):
                lines.append(f"{key}[t={t}]\t{row[key]!r}")
        return "\n".join(lines) + "\n"


def evaluate(y, y_hat, per_frame=False):
    """Full report for ``(B, T, C, H, W)`` ground truth and predictions."""
    y, y_hat = _pair(y, y_hat)
    if y.ndim != 5:
        raise ValueError(f"evaluate expects (B, T, C, H, W), got {y.shape}")
    rows = None
    if per_frame:
        rows = []
        for t in range(y.shape[1]):
            a, b = y[:, t:t + 1], y_hat[:, t:t + 1]
            rows.append(dict(mse=mse(a, b), mae=mae(a, b), ssim=ssim_sequence(a, b), psnr_db=psnr(a, b)))
    return MetricReport(mse(y, y_hat), mae(y, y_hat), ssim_sequence(y, y_hat), psnr(y, y_hat), rows)
