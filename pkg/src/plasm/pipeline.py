"""Losses, Adam, learning-rate schedules, and the pretrain / train / predict loops.

Parameters are checkpointed under four prefixes: ``phi`` (encoder), ``psi``
(translator), ``omega`` (decoder) and ``sm`` (spatial masking, pretraining
only). Optimizer moments go under ``adam.m.<name>`` / ``adam.v.<name>``.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .dataio import batch_indices
from .masking import PretrainModel
from .model import VideoPredictor
from .rng import Rng
from .tensor import ShapeError, Tensor, no_grad, reduce_sum, scale, square, sub

PHI, PSI, OMEGA, SM = "phi", "psi", "omega", "sm"
FEATURE_CACHE_BYTES = 512 << 20


class TrainingError(RuntimeError):
    """Training cannot continue (non-finite loss, bad inputs)."""


# losses ----------------------------------------------------------------------

def _frame_sse(target, pred):
    """Squared error summed over C, H, W and averaged over batch and frames."""
    target, pred = _as_tensor(target), _as_tensor(pred)
    if target.shape != pred.shape:
        raise ShapeError(f"loss: shapes differ {target.shape} vs {pred.shape}")
    if target.ndim != 5:
        raise ShapeError(f"loss expects (B, T, C, H, W), got {target.shape}")
    b, t = target.shape[:2]
    return scale(reduce_sum(square(sub(pred, target))), 1.0 / (b * t))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def loss_reconstruction(x, x_hat):
    return _frame_sse(x, x_hat)


def loss_prediction(y, y_hat):
    return _frame_sse(y, y_hat)


# optimizer -------------------------------------------------------------------

SCHEDULES = ("constant", "cosine", "onecycle")
ONECYCLE_WARMUP = 0.3
ONECYCLE_DIV = 25.0
ONECYCLE_FINAL_DIV = 1e4


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    total_steps: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")


def lr_at(schedule, step, total_steps, base_lr):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule == "constant" or total_steps == 0:
        return float(base_lr)
    if schedule == "cosine":
        return base_lr * (1 + math.cos(math.pi * step / total_steps)) / 2
    if schedule == "onecycle":
        warm = ONECYCLE_WARMUP * total_steps
        lo, hi, end = base_lr / ONECYCLE_DIV, base_lr, base_lr / ONECYCLE_FINAL_DIV
        if step <= warm:
            return lo + (hi - lo) * step / warm
        frac = (step - warm) / (total_steps - warm)
        return end + (hi - end) * (1 + math.cos(math.pi * frac)) / 2
    raise ValueError(f"unknown schedule {schedule!r}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, opt, step):
    """Bias-corrected Adam update in place; ``params`` and ``grads`` are name-keyed.

    Returns the learning rate used.
    """
    lr = lr_at(opt.schedule, step, opt.total_steps, opt.lr)
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ValueError(f"missing gradient for {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    state.t += 1
    c1 = 1.0 - opt.beta1 ** state.t
    c2 = 1.0 - opt.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        dt = p.data.dtype
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt.type(opt.beta1)
        m += dt.type(1 - opt.beta1) * g
        v *= dt.type(opt.beta2)
        v += dt.type(1 - opt.beta2) * (g * g)
        denom = np.sqrt(v / dt.type(c2)) + dt.type(opt.eps)
        p.data = p.data - dt.type(lr / c1) * m / denom
    return lr


def _adam_tensors(state):
    out = {}
    for name in state.m:
        out[f"adam.m.{name}"] = state.m[name]
        out[f"adam.v.{name}"] = state.v[name]
    out["adam.t"] = np.array(state.t, dtype=np.float32)
    return out


# logging ---------------------------------------------------------------------

@dataclass(frozen=True)
class LogEntry:
    step: int
    phase: str
    lr: float
    loss: float

    def line(self):
        return f"{self.step}\t{self.phase}\t{self.lr!r}\t{self.loss!r}"


def format_log(entries):
    return "".join(e.line() + "\n" for e in entries)


def parse_log(text):
    out = []
    for line in text.splitlines():
        step, phase, lr, loss = line.split("\t")
        out.append(LogEntry(int(step), phase, float(lr), float(loss)))
    return out


def epoch_means(entries, steps_per_epoch):
    losses = [e.loss for e in entries if e.phase in ("pretrain", "train")]
    return [float(np.mean(losses[i:i + steps_per_epoch])) for i in range(0, len(losses), steps_per_epoch)]


# parameters ------------------------------------------------------------------

def prefixed(module, prefix):
    return {f"{prefix}.{name}": p for name, p in module.named_parameters()}


def param_digest(params):
    """SHA-256 over names and raw bytes, for freezing checks."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def _load_group(module, ckpt, prefix):
    if not ckpt.has_group(prefix):
        raise KeyError(f"checkpoint has no '{prefix}' parameters")
    module.load_state_dict(ckpt.group(prefix))


# loops -----------------------------------------------------------------------

def _plan(dataset, cfg, epochs, max_steps):
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")
    bs = min(cfg.batch_size, len(dataset))
    per_epoch = len(dataset) // bs
    total = epochs * per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    return bs, per_epoch, total


def _check_finite(loss, step, phase):
    if not np.isfinite(loss):
        raise TrainingError(f"{phase}: non-finite loss {loss} at step {step}; aborting")


def _fit(phase, params, loss_fn, dataset, bs, total, opt, rng, progress):
    """Shared optimisation loop; ``loss_fn(idx, step)`` builds the graph."""
    state = AdamState()
    log = []
    shuffle = rng.derive(1)
    step, epoch = 0, 0
    while step < total:
        for idx in batch_indices(len(dataset), bs, shuffle, epoch):
            if step >= total:
                break
            for p in params.values():
                p.grad = None
            loss = loss_fn(idx, step)
            value = float(loss.data)
            _check_finite(value, step, phase)
            loss.backward()
            lr = adam_step(params, {k: p.grad for k, p in params.items()}, state, opt, step)
            entry = LogEntry(step, phase, lr, value)
            log.append(entry)
            if progress is not None:
                progress(entry)
            step += 1
        epoch += 1
    return state, log


def pretrain(dataset, cfg, opt=None, rng=None, max_steps=None, progress=None):
    """Masked reconstruction of the first T frames of every clip.

    Returns ``(Checkpoint(phase="pretrained"), log)`` with encoder, decoder and
    (when enabled) SM parameters plus Adam moments.
    """
    mc = cfg.model
    rng = Rng(cfg.seed) if rng is None else rng
    if dataset.t_total < mc.t_in:
        raise TrainingError(f"clips have {dataset.t_total} frames, pretraining needs T={mc.t_in}")
    if dataset.frame_shape != (mc.channels, mc.height, mc.width):
        raise ShapeError(f"dataset frames {dataset.frame_shape} do not match config "
                         f"{(mc.channels, mc.height, mc.width)}")
    bs, _, total = _plan(dataset, cfg, cfg.pretrain_epochs, max_steps)
    opt = opt or OptimizerConfig(cfg.pretrain_lr, schedule=cfg.pretrain_schedule, total_steps=total)
    model = PretrainModel(mc, rng.derive(0), use_sm=cfg.use_sm)
    params = {**prefixed(model.encoder, PHI), **prefixed(model.decoder, OMEGA)}
    if cfg.use_sm:
        params.update(prefixed(model.sm, SM))
    mask_rng = rng.derive(2)

    def loss_fn(idx, step):
        x = Tensor(_to_float(dataset.clips[idx, :mc.t_in]))
        return loss_reconstruction(x, model(x, mask_rng.derive(step)))

    state, log = _fit("pretrain", params, loss_fn, dataset, bs, total, opt, rng, progress)
    tensors = {name: p.data for name, p in params.items()}
    tensors.update(_adam_tensors(state))
    return Checkpoint("pretrained", tensors, cfg.to_text()), log


def _to_float(clips):
    if clips.dtype == np.uint8:
        return clips.astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(clips, dtype=np.float32)


def build_predictor(cfg, init=None, rng=None):
    """VideoPredictor with Kaiming init, optionally taking encoder/decoder from ``init``."""
    rng = Rng(cfg.seed) if rng is None else rng
    model = VideoPredictor(cfg.model, rng.derive(0))
    if init is not None:
        _load_group(model.encoder, init, PHI)
        _load_group(model.decoder, init, OMEGA)
    return model


def _encode_all(model, clips, t_in, bs):
    feats = []
    with no_grad():
        for s in range(0, len(clips), bs):
            feats.append(model.encoder(Tensor(_to_float(clips[s:s + bs, :t_in]))).data)
    return np.concatenate(feats)


def train(dataset, cfg, opt=None, init=None, rng=None, max_steps=None, progress=None):
    """Prediction training with the encoder frozen.

    ``init`` is a pretrained checkpoint (encoder and decoder are reused) or
    ``None`` for Kaiming initialisation throughout. The translator is always
    freshly initialised. Returns ``(Checkpoint(phase="trained"), log)``; the
    log ends with an ``eval`` line holding the final model's loss over the
    whole dataset.
    """
    mc = cfg.model
    rng = Rng(cfg.seed) if rng is None else rng
    if dataset.t_total < mc.t_in + mc.t_out:
        raise TrainingError(f"clips have {dataset.t_total} frames, need T+T'={mc.t_in + mc.t_out}")
    if dataset.frame_shape != (mc.channels, mc.height, mc.width):
        raise ShapeError(f"dataset frames {dataset.frame_shape} do not match config "
                         f"{(mc.channels, mc.height, mc.width)}")
    bs, _, total = _plan(dataset, cfg, cfg.epochs, max_steps)
    opt = opt or OptimizerConfig(cfg.lr, schedule=cfg.schedule, total_steps=total)
    model = build_predictor(cfg, init, rng)
    phi = prefixed(model.encoder, PHI)
    for p in phi.values():
        p.requires_grad = False
    before = param_digest(phi)
    params = {**prefixed(model.translator, PSI), **prefixed(model.decoder, OMEGA)}
    clips = dataset.clips
    t_in, t_out = mc.t_in, mc.t_out
    feat_bytes = len(clips) * t_in * mc.enc_channels * mc.feat_hw[0] * mc.feat_hw[1] * 4
    cache = _encode_all(model, clips, t_in, bs) if feat_bytes <= FEATURE_CACHE_BYTES else None

    def features(idx):
        if cache is not None:
            return Tensor(cache[idx])
        with no_grad():
            return model.encoder(Tensor(_to_float(clips[idx, :t_in])))

    def loss_fn(idx, step):
        y = _to_float(clips[idx, t_in:t_in + t_out])
        return loss_prediction(y, model.decoder(model.translator(features(idx)), t_out))

    state, log = _fit("train", params, loss_fn, dataset, bs, total, opt, rng, progress)
    if param_digest(phi) != before:
        raise TrainingError("encoder parameters changed during training")
    final = predict_clips(model, clips, t_in, bs)
    target = _to_float(clips[:, t_in:t_in + t_out])
    log.append(LogEntry(total, "eval", 0.0, frame_mse(target, final)))
    tensors = {name: p.data for name, p in {**phi, **params}.items()}
    tensors.update(_adam_tensors(state))
    return Checkpoint("trained", tensors, cfg.to_text()), log


def frame_mse(y, y_hat):
    """Loss convention in float64: mean over (B, T), sum over (C, H, W)."""
    d = np.asarray(y, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64)
    return float((d * d).sum() / (d.shape[0] * d.shape[1]))


def predict_clips(model, clips, t_in, bs):
    out = []
    with no_grad():
        for s in range(0, len(clips), bs):
            out.append(model(Tensor(_to_float(clips[s:s + bs, :t_in]))).data)
    return np.concatenate(out)


def load_predictor(checkpoint, cfg):
    """VideoPredictor holding every parameter from a trained checkpoint."""
    model = VideoPredictor(cfg.model, Rng(cfg.seed).derive(0))
    for module, prefix in ((model.encoder, PHI), (model.translator, PSI), (model.decoder, OMEGA)):
        _load_group(module, checkpoint, prefix)
    return model


def predict(frames, checkpoint, cfg, batch_size=None):
    """``(B, T, C, H, W)`` inputs -> ``(B, T', C, H, W)`` float32 predictions.

    No masking at inference; u8 inputs are scaled to [0, 1].
    """
    mc = cfg.model
    frames = np.asarray(frames)
    if frames.ndim != 5 or frames.shape[1:] != (mc.t_in, mc.channels, mc.height, mc.width):
        raise ShapeError(f"predict: frames {frames.shape} do not match config "
                         f"(B, {mc.t_in}, {mc.channels}, {mc.height}, {mc.width})")
    model = load_predictor(checkpoint, cfg) if isinstance(checkpoint, Checkpoint) else checkpoint
    return predict_clips(model, frames, mc.t_in, batch_size or cfg.batch_size)
