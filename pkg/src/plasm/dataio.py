"""Synthetic moving-sprite clips, the VSEQ container, and seeded batching."""

import struct
from dataclasses import dataclass

import numpy as np

from .rng import Rng

SPRITE = 12
MAGIC = b"VSEQ"
VERSION = 1
_HEADER = struct.Struct("<4sBBBB5I")
_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype("<f4")}
_CODES = {v: k for k, v in _DTYPES.items()}
_MAX_BYTES = 1 << 40


class DatasetFormatError(ValueError):
    """Malformed or truncated VSEQ data."""


@dataclass
class VideoDataset:
    """``clips`` has shape ``(N, T_total, C, H, W)``, u8 in [0, 255] or f32 in [0, 1]."""

    clips: np.ndarray

    def __post_init__(self):
        if self.clips.ndim != 5:
            raise ValueError(f"clips must be 5-d (N, T, C, H, W), got shape {self.clips.shape}")
        if self.clips.dtype not in _CODES:
            raise ValueError(f"unsupported dtype {self.clips.dtype}; use uint8 or float32")

    def __len__(self):
        return self.clips.shape[0]

    @property
    def t_total(self):
        return self.clips.shape[1]

    @property
    def frame_shape(self):
        return self.clips.shape[2:]

    def as_float(self):
        """Pixels as float32 in [0, 1]."""
        if self.clips.dtype == np.uint8:
            return self.clips.astype(np.float32) / np.float32(255.0)
        return self.clips.astype(np.float32)


# generation ------------------------------------------------------------------

# Seven-segment layout on the 12x12 stamp: (row slice, col slice) per segment.
_SEGMENTS = {
    "a": (slice(0, 2), slice(2, 10)),
    "b": (slice(1, 6), slice(9, 11)),
    "c": (slice(6, 11), slice(9, 11)),
    "d": (slice(10, 12), slice(2, 10)),
    "e": (slice(6, 11), slice(1, 3)),
    "f": (slice(1, 6), slice(1, 3)),
    "g": (slice(5, 7), slice(2, 10)),
}
_DIGITS = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"]


def make_sprite(rng):
    """Procedural 12x12 glyph: a random seven-segment digit at a random intensity."""
    stamp = np.zeros((SPRITE, SPRITE), dtype=np.uint8)
    level = int(rng.integers(160, 256))
    for seg in _DIGITS[int(rng.integers(0, 10))]:
        stamp[_SEGMENTS[seg]] = level
    return stamp


def reflect(pos, vel, hi):
    """One step of motion on ``[0, hi]`` with mirror reflection at the walls."""
    pos = pos + vel
    if pos > hi:
        pos, vel = 2 * hi - pos, -vel
    elif pos < 0:
        pos, vel = -pos, -vel
    return pos, vel


def gen_moving_shapes(n_clips, t_total, height, width, n_sprites=2, rng=None, channels=1):
    """Moving-MNIST-like clips of bouncing sprites, uint8.

    Each sprite starts at a uniform position with a uniform direction and
    speed in [1, 4] px/frame, fixed for the clip. Frames are the clamped
    pixel-wise max of all stamps; extra channels repeat the grayscale frame.
    """
    if height < 2 * SPRITE or width < 2 * SPRITE:
        raise ValueError(f"frames must be at least {2 * SPRITE}x{2 * SPRITE}, got {height}x{width}")
    rng = Rng(0) if rng is None else rng
    hi_y, hi_x = height - SPRITE, width - SPRITE
    clips = np.zeros((n_clips, t_total, channels, height, width), dtype=np.uint8)
    for i in range(n_clips):
        crng = rng.derive(i)
        for k in range(n_sprites):
            srng = crng.derive(k)
            stamp = make_sprite(srng)
            y, x = srng.uniform(0, hi_y), srng.uniform(0, hi_x)
            angle, speed = srng.uniform(0, 2 * np.pi), srng.uniform(1, 4)
            vy, vx = speed * np.sin(angle), speed * np.cos(angle)
            for t in range(t_total):
                r, c = int(y), int(x)
                view = clips[i, t, :, r:r + SPRITE, c:c + SPRITE]
                np.maximum(view, stamp, out=view)
                y, vy = reflect(y, vy, hi_y)
                x, vx = reflect(x, vx, hi_x)
    np.clip(clips, 0, 255, out=clips)
    return VideoDataset(clips)


# VSEQ container --------------------------------------------------------------

def encode_dataset(ds):
    clips = ds.clips
    code = _CODES[clips.dtype]
    header = _HEADER.pack(MAGIC, VERSION, code, 0, 0, *clips.shape)
    return header + np.ascontiguousarray(clips, dtype=_DTYPES[code]).tobytes()


def decode_dataset(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DatasetFormatError("bad magic: not a VSEQ file")
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes")
    _, version, code, _, _, *dims = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported VSEQ version {version}")
    if code not in _DTYPES:
        raise DatasetFormatError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    count = 1
    for d in dims:
        count *= d
    need = count * dtype.itemsize
    if need > _MAX_BYTES:
        raise DatasetFormatError(f"header dims {tuple(dims)} overflow the size limit")
    have = len(buf) - _HEADER.size
    if have < need:
        raise DatasetFormatError(f"truncated payload: {have} of {need} bytes")
    if have > need:
        raise DatasetFormatError(f"{have - need} trailing bytes after payload")
    clips = np.frombuffer(buf, dtype=dtype, count=count, offset=_HEADER.size).reshape(dims)
    return VideoDataset(clips.astype(dtype.newbyteorder("=")))


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


# batching --------------------------------------------------------------------

def batch_indices(n, batch_size, rng, epoch=0):
    """Clip indices for one epoch: a seeded permutation cut into full batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.derive(epoch).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n - batch_size + 1, batch_size)]


def batches(ds, batch_size, rng, t_in, t_out, epoch=0):
    """One epoch of ``(input, target)`` float32 batches in a seeded order.

    The permutation depends only on ``(rng, epoch)``. A trailing partial batch
    is dropped.
    """
    if ds.t_total < t_in + t_out:
        raise ValueError(f"clips have {ds.t_total} frames, need T+T'={t_in + t_out}")
    for idx in batch_indices(len(ds), batch_size, rng, epoch):
        clip = VideoDataset(ds.clips[idx, :t_in + t_out]).as_float()
        yield clip[:, :t_in], clip[:, t_in:]
