"""Command-line entry point: ``plasm <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage error. Diagnostics go to stderr.
"""

import argparse
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, parse_config, read_config_text
from .dataio import DatasetFormatError, VideoDataset, gen_moving_shapes, load_dataset, save_dataset
from .metrics import evaluate
from .pipeline import TrainingError, format_log, predict, pretrain, train
from .rng import Rng
from .tensor import ShapeError


class UsageError(Exception):
    pass


def _parse_sets(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _run_config(args, **flags):
    merged = _parse_sets(args.set)
    merged.update({k: v for k, v in flags.items() if v is not None})
    if args.seed is not None:
        merged["seed"] = args.seed
    if getattr(args, "batch_size", None) is not None:
        merged["batch_size"] = args.batch_size
    return parse_config(path=args.config, preset_name=args.preset, **merged)


def _write_log(entries, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_log(entries))


def _check_frames(ds, cfg):
    want = (cfg.channels, cfg.height, cfg.width)
    if ds.frame_shape != want:
        raise ShapeError(f"dataset frames {ds.frame_shape} do not match preset {cfg.preset} {want}")


# subcommands -----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _run_config(args)
    frames = args.frames or cfg.t_in + cfg.t_out
    ds = gen_moving_shapes(args.clips, frames, cfg.height, cfg.width, n_sprites=args.sprites,
                           rng=Rng(cfg.seed).derive(7), channels=cfg.channels)
    save_dataset(ds, args.output)
    print(f"wrote {args.clips} clips x {frames} frames ({cfg.channels}x{cfg.height}x{cfg.width}) to {args.output}",
          file=sys.stderr)


def cmd_pretrain(args):
    cfg = _run_config(args, pretrain_epochs=args.epochs, pretrain_lr=args.lr, input_mask_ratio=args.r0,
                      sm_ratio=args.sm_ratio, use_sm=False if args.no_sm else None, dataset=args.data)
    ds = load_dataset(args.data)
    _check_frames(ds, cfg)
    ckpt, log = pretrain(ds, cfg, max_steps=args.max_steps)
    save_checkpoint(ckpt, args.output)
    _write_log(log, args.log or args.output + ".log")
    print(f"pretrain: {len(log)} steps, final loss {log[-1].loss:.6g}" if log else "pretrain: 0 steps",
          file=sys.stderr)


def cmd_train(args):
    cfg = _run_config(args, epochs=args.epochs, lr=args.lr, use_pla=False if args.no_pla else None,
                      block=args.block, dataset=args.data)
    ds = load_dataset(args.data)
    _check_frames(ds, cfg)
    init = None
    if args.init:
        init = load_checkpoint(args.init)
        if init.phase != "pretrained":
            raise CheckpointError(f"--init expects a pretrained checkpoint, {args.init} is '{init.phase}'")
    ckpt, log = train(ds, cfg, init=init, max_steps=args.max_steps)
    save_checkpoint(ckpt, args.output)
    _write_log(log, args.log or args.output + ".log")
    print(f"train: {len(log) - 1} steps, final loss {log[-1].loss:.6g}", file=sys.stderr)


def _config_from_checkpoint(ckpt):
    values = read_config_text(ckpt.config_text)
    return parse_config(preset_name=values.pop("preset", None), **values)


def cmd_predict(args):
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.phase != "trained":
        raise CheckpointError(f"predict needs a trained checkpoint, {args.ckpt} is '{ckpt.phase}'")
    cfg = _config_from_checkpoint(ckpt)
    ds = load_dataset(args.data)
    _check_frames(ds, cfg)
    if ds.t_total < cfg.t_in:
        raise ShapeError(f"clips have {ds.t_total} frames, need T={cfg.t_in}")
    out = predict(ds.clips[:, :cfg.t_in], ckpt, cfg)
    save_dataset(VideoDataset(out.astype(np.float32)), args.output)
    print(f"wrote predictions {out.shape} to {args.output}", file=sys.stderr)


def cmd_eval(args):
    pred, gt = load_dataset(args.pred), load_dataset(args.gt)
    if pred.frame_shape != gt.frame_shape or len(pred) != len(gt):
        raise ShapeError(f"prediction {pred.clips.shape} and ground truth {gt.clips.shape} are not comparable")
    offset = gt.t_total - pred.t_total if args.offset is None else args.offset
    if offset < 0 or offset + pred.t_total > gt.t_total:
        raise ShapeError(f"offset {offset} does not fit {pred.t_total} predicted frames into {gt.t_total}")
    target = gt.as_float()[:, offset:offset + pred.t_total]
    report = evaluate(target, pred.as_float(), per_frame=args.per_frame)
    text = report.to_text()
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    sys.stdout.write(text)


def _pgm(frame):
    h, w = frame.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + frame.astype(np.uint8).tobytes()


def to_u8(frames):
    if frames.dtype == np.uint8:
        return frames
    return np.rint(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)


def cmd_export_frames(args):
    ds = load_dataset(args.data)
    clips = range(len(ds)) if args.clip is None else [args.clip]
    if args.clip is not None and not 0 <= args.clip < len(ds):
        raise UsageError(f"--clip {args.clip} out of range (dataset has {len(ds)} clips)")
    os.makedirs(args.output, exist_ok=True)
    count = 0
    for i in clips:
        frames = to_u8(ds.clips[i])
        for t, frame in enumerate(frames):
            for c, plane in enumerate(frame):
                suffix = f"_c{c}" if frame.shape[0] > 1 else ""
                with open(os.path.join(args.output, f"clip{i:04d}_t{t:03d}{suffix}.pgm"), "wb") as fh:
                    fh.write(_pgm(plane))
                count += 1
    print(f"wrote {count} PGM files to {args.output}", file=sys.stderr)


# parser ----------------------------------------------------------------------

def _common(p, batch=True):
    p.add_argument("--preset", choices=sorted(PRESETS), help="named configuration (default mmnist)")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int, help="random seed (falls back to PLASM_SEED)")
    if batch:
        p.add_argument("--batch-size", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="plasm", description="Masked-pretraining video prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic moving-sprite VSEQ dataset")
    _common(p, batch=False)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--frames", type=int, help="frames per clip (default T+T')")
    p.add_argument("--sprites", type=int, default=2)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked reconstruction pretraining of encoder and decoder")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--r0", type=float, help="input pixel mask ratio (0 disables input masking)")
    p.add_argument("--sm-ratio", type=float, help="spatial masking ratio r")
    p.add_argument("--no-sm", action="store_true", help="skip the spatial masking module")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--log")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the predictor with the encoder frozen")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="pretrained checkpoint (omit for Kaiming init)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-pla", action="store_true", help="replace PLA blocks with plain translator blocks")
    p.add_argument("--block", choices=("convnext", "conv"))
    p.add_argument("--max-steps", type=int)
    p.add_argument("--log")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict T' frames for every clip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metric report of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--offset", type=int, help="first ground-truth frame to compare (default: last frames)")
    p.add_argument("--per-frame", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-frames", help="write frames as binary PGM images")
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_export_frames)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"plasm {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"plasm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
