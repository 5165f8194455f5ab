"""PLCK checkpoint container: named f32 tensors, a phase tag and a config echo."""

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"PLCK"
VERSION = 1
PHASES = ("pretrained", "trained")
_HEAD = struct.Struct("<4sBBI")


class CheckpointError(ValueError):
    """Malformed, truncated or inconsistent checkpoint data."""


@dataclass
class Checkpoint:
    phase: str
    tensors: dict = field(default_factory=dict)
    config_text: str = ""

    def __post_init__(self):
        if self.phase not in PHASES:
            raise CheckpointError(f"phase must be one of {PHASES}, got {self.phase!r}")

    def group(self, prefix):
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def has_group(self, prefix):
        return any(k.startswith(prefix + ".") for k in self.tensors)


def encode_checkpoint(ckpt):
    parts = [_HEAD.pack(MAGIC, VERSION, PHASES.index(ckpt.phase), len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"{name}: too many dimensions")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    text = ckpt.config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(text)) + text)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a PLCK file")
    r = _Reader(buf)
    _, version, phase, count = r.unpack(_HEAD.format, "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported PLCK version {version}")
    if phase >= len(PHASES):
        raise CheckpointError(f"unknown phase code {phase}")
    tensors = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(nlen, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i}: name is not valid UTF-8") from None
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{ndim}I", f"dims of {name}")
        size = 4 * int(np.prod(dims, dtype=np.int64))
        data = r.take(size, f"payload of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
    (tlen,) = r.unpack("<I", "config length")
    try:
        text = r.take(tlen, "config text").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("config echo is not valid UTF-8") from None
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(PHASES[phase], tensors, text)


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
