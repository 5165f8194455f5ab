"""Model/run configuration, named presets, and the ``key = value`` config format."""

import os
from dataclasses import asdict, dataclass, fields, replace


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    channels: int = 1
    t_in: int = 10
    t_out: int = 10
    enc_channels: int = 64     # width of the per-frame spatial feature
    hid_channels: int = 512    # translator width
    enc_depth: int = 4         # conv blocks in encoder (and decoder)
    trans_depth: int = 4       # ConvNeXt blocks (= PLA blocks) in translator
    heads: int = 2
    input_mask_ratio: float = 0.96
    sm_ratio: float = 0.1
    epochs: int = 2000
    use_pla: bool = True
    block: str = "convnext"

    @property
    def downsample(self):
        return 2 ** (self.enc_depth // 2)

    @property
    def feat_hw(self):
        return self.height // self.downsample, self.width // self.downsample

    def validate(self):
        for name in ("height", "width", "channels", "t_in", "t_out", "enc_channels",
                     "hid_channels", "enc_depth", "trans_depth", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        d = self.downsample
        if self.height % d or self.width % d:
            raise ConfigError(f"H={self.height}, W={self.width} must be divisible by 2^floor(M/2)={d}")
        if self.hid_channels % self.heads:
            raise ConfigError(f"hid_channels={self.hid_channels} not divisible by heads={self.heads}")
        if self.hid_channels % 2:
            raise ConfigError("hid_channels must be even (group norm uses 2 groups)")
        for name in ("input_mask_ratio", "sm_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.block not in ("convnext", "conv"):
            raise ConfigError(f"block must be 'convnext' or 'conv', got {self.block!r}")
        return self


@dataclass(frozen=True)
class RunConfig:
    preset: str = "mmnist"
    height: int = 64
    width: int = 64
    channels: int = 1
    t_in: int = 10
    t_out: int = 10
    enc_channels: int = 64
    hid_channels: int = 512
    enc_depth: int = 4
    trans_depth: int = 4
    heads: int = 2
    input_mask_ratio: float = 0.96
    sm_ratio: float = 0.1
    epochs: int = 2000
    use_pla: bool = True
    block: str = "convnext"
    use_sm: bool = True
    lr: float = 0.01
    schedule: str = "onecycle"
    pretrain_lr: float = 0.01
    pretrain_epochs: int = 50
    pretrain_schedule: str = "constant"
    batch_size: int = 16
    seed: int = 0
    dataset: str = ""

    @property
    def model(self):
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names}).validate()

    def validate(self):
        _ = self.model
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("learning rates must be positive")
        for name in ("schedule", "pretrain_schedule"):
            if getattr(self, name) not in SCHEDULES:
                raise ConfigError(f"{name} must be one of {SCHEDULES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        return self

    def to_text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


SCHEDULES = ("constant", "cosine", "onecycle")

# Published model sizes, plus per-dataset lr / schedule / head count.
PRESETS = {
    "mmnist": dict(height=64, width=64, channels=1, t_in=10, t_out=10, input_mask_ratio=0.96,
                   enc_channels=64, hid_channels=512, enc_depth=4, trans_depth=4, epochs=2000,
                   heads=2, lr=0.01, schedule="onecycle"),
    "taxibj": dict(height=32, width=32, channels=2, t_in=4, t_out=4, input_mask_ratio=0.97,
                   enc_channels=32, hid_channels=256, enc_depth=2, trans_depth=4, epochs=50,
                   heads=8, lr=0.001, schedule="cosine"),
    "human36m": dict(height=128, width=128, channels=3, t_in=4, t_out=4, input_mask_ratio=0.95,
                     enc_channels=64, hid_channels=128, enc_depth=2, trans_depth=3, epochs=50,
                     heads=2, lr=0.001, schedule="onecycle"),
    "kitti": dict(height=128, width=160, channels=3, t_in=10, t_out=1, input_mask_ratio=0.95,
                  enc_channels=64, hid_channels=256, enc_depth=2, trans_depth=3, epochs=50,
                  heads=8, lr=0.001, schedule="onecycle"),
    "kth": dict(height=128, width=128, channels=1, t_in=10, t_out=20, input_mask_ratio=0.90,
                enc_channels=32, hid_channels=128, enc_depth=3, trans_depth=3, epochs=100,
                heads=2, lr=0.001, schedule="onecycle"),
}
PRESETS["kth40"] = dict(PRESETS["kth"], t_out=40)


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(preset=name, **{**PRESETS[name], **overrides}).validate()


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key, raw):
    kind = _FIELD_TYPES[key]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if kind in ("bool", bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def read_config_text(text):
    """Parse ``key = value`` lines (``#`` comments allowed) into a dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_config(path=None, text=None, preset_name=None, **flags):
    """Build a validated RunConfig: preset defaults < file < explicit flags.

    ``flags`` with value ``None`` are ignored. When no seed is given anywhere,
    the ``PLASM_SEED`` environment variable is used.
    """
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(read_config_text(fh.read()))
    if text is not None:
        values.update(read_config_text(text))
    for key, val in flags.items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, val)
    name = preset_name or values.get("preset", "mmnist")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = {**PRESETS[name], **values, "preset": name}
    if "seed" not in merged and os.environ.get("PLASM_SEED"):
        merged["seed"] = _coerce("seed", os.environ["PLASM_SEED"])
    return RunConfig(**merged).validate()


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None}).validate()


__all__ = ["ConfigError", "ModelConfig", "RunConfig", "PRESETS", "SCHEDULES", "preset",
           "parse_config", "read_config_text", "with_overrides"]
