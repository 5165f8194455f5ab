"""Acceptance criteria 1-10, one test each.

Every test prints (and records for the terminal summary) a single line
``criterion N: PASS|FAIL ...``. Criteria 5-7 train real models and take
several minutes in total.
"""

import os
import shutil
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from plasm.checkpoint import (
    Checkpoint,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from plasm.cli import main as cli
from plasm.config import ModelConfig, preset
from plasm.dataio import DatasetFormatError, decode_dataset, encode_dataset, gen_moving_shapes, load_dataset
from plasm.gradcheck import check_gradients
from plasm.masking import PretrainModel, SpatialMasking
from plasm.metrics import mae, mse, psnr_from_mse, ssim, ssim_bruteforce
from plasm.model import Decoder, Encoder, PLABlock, Translator, VideoPredictor
from plasm.nn import (
    ConvNeXtBlock,
    PlainConvBlock,
    VisibilityMask,
    conv2d,
    conv_transpose2d,
    dwconv2d,
    global_avg_pool,
    group_norm,
    sparse_conv2d,
)
from plasm.pipeline import (
    OMEGA,
    PHI,
    SM,
    build_predictor,
    frame_mse,
    loss_prediction,
    parse_log,
    predict,
    pretrain,
    train,
)
from plasm.rng import Rng
from plasm.tensor import Tensor, no_grad

# reduced Moving-MNIST geometry shared by the training checks
OVERFIT = dict(enc_channels=16, hid_channels=64, trans_depth=2)
OVERFIT_STEPS = 2000
OVERFIT_BATCH = 2


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def f64(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=True)


def overfit_data():
    return gen_moving_shapes(8, 20, 64, 64, rng=Rng(1))


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = f64(rng, 2, 4, 6, 6)
    mask = VisibilityMask(rng.random((2, 1, 6, 6)) < 0.6)
    cases = {
        "conv3x3": (lambda x, w, b: conv2d(x, w, b), [x, f64(rng, 6, 4, 3, 3), f64(rng, 6)]),
        "conv3x3/s2": (lambda x, w, b: conv2d(x, w, b, stride=2), [x, f64(rng, 6, 4, 3, 3), f64(rng, 6)]),
        "conv1x1": (lambda x, w, b: conv2d(x, w, b), [x, f64(rng, 8, 4, 1, 1), f64(rng, 8)]),
        "sparse_conv": (lambda x, w, b: sparse_conv2d(x, w, b, mask, stride=2)[0],
                        [x, f64(rng, 6, 4, 3, 3), f64(rng, 6)]),
        "dwconv7x7": (lambda x, w, b: dwconv2d(x, w, b), [x, f64(rng, 4, 1, 7, 7), f64(rng, 4)]),
        "tconv/s2": (lambda x, w, b: conv_transpose2d(x, w, b, stride=2), [x, f64(rng, 4, 3, 3, 3), f64(rng, 3)]),
        "groupnorm": (lambda x, g, b: group_norm(x, 2, g, b), [x, f64(rng, 4), f64(rng, 4)]),
        "groupnorm+lrelu": (lambda x, g, b: group_norm(x, 2, g, b, slope=0.01), [x, f64(rng, 4), f64(rng, 4)]),
        "gap": (global_avg_pool, [x]),
    }
    errors = {}
    for name, (fn, inputs) in cases.items():
        errors[name] = max(check_gradients(fn, inputs).values())

    def module_case(name, module, fn, inputs):
        params = [p for _, p in module.named_parameters()]
        errors[name] = max(check_gradients(lambda *a: fn(*a[:len(inputs)]), [*inputs, *params],
                                           max_coords=12).values())

    z = f64(rng, 2, 8, 4, 4)
    for cls in (ConvNeXtBlock, PlainConvBlock):
        blk = cls(8, Rng(1), dtype=np.float64)
        module_case(cls.__name__, blk, blk, [z])
    pla = PLABlock(8, 2, Rng(2), dtype=np.float64)
    module_case("PLA", pla, pla, [z, f64(rng, 2, 8, 4, 4)])
    sm = SpatialMasking(4, Rng(3), dtype=np.float64)
    module_case("SM(r=0)", sm, lambda s: sm(s, 0.0), [f64(rng, 2, 4, 3, 3)])

    cfg = ModelConfig(height=8, width=8, channels=1, t_in=2, t_out=2, enc_channels=4, hid_channels=8,
                      enc_depth=2, trans_depth=2, heads=2).validate()
    frames = f64(rng, 2, 2, 1, 8, 8)
    enc = Encoder(cfg, Rng(4), dtype=np.float64)
    module_case("encoder", enc, enc, [frames])
    dec = Decoder(cfg, Rng(5), dtype=np.float64)
    module_case("decoder", dec, lambda s: dec(s, 2), [f64(rng, 2, 8, 4, 4)])
    tr = Translator(cfg, Rng(6), dtype=np.float64)
    module_case("translator", tr, tr, [f64(rng, 2, 8, 4, 4)])

    model = VideoPredictor(cfg, Rng(7), dtype=np.float64)
    target = rng.random((2, 2, 1, 8, 8))
    x_in = Tensor(rng.random((2, 2, 1, 8, 8)))
    params = [p for _, p in model.named_parameters() if p.requires_grad]
    # eps 1e-6 lands across a LeakyReLU kink in the decoder; 1e-7 stays on one side
    errors["end-to-end"] = max(check_gradients(lambda *ps: loss_prediction(target, model(x_in)), params,
                                               max_coords=6, eps=1e-7, joint=True).values())
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-5 and elapsed < 60
    report(1, ok, f"{len(errors)} gradient checks, worst {worst} rel err {errors[worst]:.2e} (< 1e-5), "
                  f"{elapsed:.1f}s (< 60s)")


# 2 ---------------------------------------------------------------------------

def test_criterion_2_sparse_conv():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    w = Tensor(rng.standard_normal((5, 3, 3, 3)).astype(np.float32))
    b = Tensor(rng.standard_normal(5).astype(np.float32))
    checks = []
    for stride in (1, 2):
        dense = conv2d(Tensor(x), w, b, stride=stride).data
        sparse, _ = sparse_conv2d(Tensor(x), w, b, VisibilityMask.all_visible(2, 16, 16), stride=stride)
        checks.append(dense.tobytes() == sparse.data.tobytes())
    exact = all(checks)
    mask = VisibilityMask(rng.random((2, 1, 16, 16)) < 0.3)
    noisy = np.where(mask.mask, x, rng.standard_normal(x.shape).astype(np.float32) * 1e3)
    diff = 0.0
    for stride in (1, 2):
        a, m = sparse_conv2d(Tensor(x), w, b, mask, stride=stride)
        c, _ = sparse_conv2d(Tensor(noisy), w, b, mask, stride=stride)
        vis = np.broadcast_to(m.mask, a.shape)
        diff = max(diff, float(np.max(np.abs(a.data[vis] - c.data[vis]))))
    none = VisibilityMask(np.zeros((2, 1, 16, 16), dtype=bool))
    zero_out, _ = sparse_conv2d(Tensor(x), w, b, none)
    all_zero = not zero_out.data.any()
    report(2, exact and diff == 0 and all_zero,
           f"all-visible bit-exact={exact}, masked perturbation max diff={diff}, all-masked output zero={all_zero}")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_sm_masking():
    parts, ok = [], True
    for r, c, want in ((0.1, 64, 409), (0.1, 32, 102), (0.05, 16, 12)):
        sm = SpatialMasking(c, Rng(c))
        sm(Tensor(np.random.default_rng(c).standard_normal((4, c, 4, 4)).astype(np.float32)), r)
        masked, probs = sm.last["masked"], sm.last["probs"]
        counts = set(masked.reshape(4, -1).sum(axis=1).tolist())
        zero = bool(np.all(probs[masked] == 0))
        live = ~masked.all(axis=2)
        row_err = float(np.max(np.abs(probs.sum(axis=2)[live] - 1)))
        ok &= counts == {want} and zero and row_err < 1e-6
        parts.append(f"(r={r}, C={c}) count={sorted(counts)} zeros={zero} row err={row_err:.1e}")
    report(3, ok, "; ".join(parts))


# 4 ---------------------------------------------------------------------------

EXPECTED_FEAT = {"mmnist": 16, "taxibj": 16, "human36m": 64, "kitti": 64, "kth": 64, "kth40": 64}


def test_criterion_4_shapes():
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, feat in EXPECTED_FEAT.items():
        cfg = preset(name)
        mc = cfg.model
        model = build_predictor(cfg, rng=Rng(0))
        x = np.random.default_rng(0).random((1, mc.t_in, mc.channels, mc.height, mc.width)).astype(np.float32)
        with no_grad():
            s = model.encoder.forward_frames(Tensor(x))
        out = predict(x, model, cfg, batch_size=1)
        want = (1, mc.t_out, mc.channels, mc.height, mc.width)
        good = out.shape == want and s.shape[2] == feat and mc.height // 2 ** (mc.enc_depth // 2) == feat
        ok &= good
        parts.append(f"{name} {out.shape} feat {s.shape[2]}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30
    report(4, ok, "; ".join(parts) + f"; {elapsed:.1f}s (< 30s)")


# 5 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_overfit():
    cfg = preset("mmnist", **OVERFIT, batch_size=OVERFIT_BATCH, epochs=10**6)
    t0 = time.perf_counter()
    _, log = train(overfit_data(), cfg, max_steps=OVERFIT_STEPS)
    elapsed = time.perf_counter() - t0
    initial, final = log[0].loss, log[-1].loss
    ok = final < 5.0 and final < 0.1 * initial and elapsed < 600
    report(5, ok, f"8 clips, {OVERFIT_STEPS} steps: prediction MSE {initial:.1f} -> {final:.3f} "
                  f"(< 5.0 and < {0.1 * initial:.1f}), {elapsed:.0f}s (< 600s)")


# 6 ---------------------------------------------------------------------------

PRETRAIN_STEPS = 1000


@pytest.mark.slow
def test_criterion_6_pretrain():
    ds = gen_moving_shapes(1, 20, 64, 64, rng=Rng(2))
    cfg = preset("mmnist", **OVERFIT, input_mask_ratio=0.5, sm_ratio=0.1, batch_size=1, pretrain_epochs=10**6)
    ck, log = pretrain(ds, cfg, max_steps=PRETRAIN_STEPS)
    mc = cfg.model
    model = PretrainModel(mc, Rng(0))
    model.encoder.load_state_dict(ck.group(PHI))
    model.decoder.load_state_dict(ck.group(OMEGA))
    model.sm.load_state_dict(ck.group(SM))
    x = ds.as_float()[:, :mc.t_in]
    with no_grad():
        recon = model(Tensor(x), Rng(99)).data
    per_pixel = frame_mse(x, recon) / (mc.channels * mc.height * mc.width)

    phi = {k: v.copy() for k, v in ck.group(PHI).items()}
    trained, tlog = train(ds, cfg, init=ck, max_steps=20)
    same = all(np.array_equal(trained.tensors[f"{PHI}.{k}"], v) for k, v in phi.items())
    omega_loaded = not np.array_equal(trained.tensors[f"{OMEGA}.readout.weight"], ck.tensors[f"{OMEGA}.readout.weight"])
    ok = per_pixel < 1e-2 and same and len(log) <= 1000
    report(6, ok, f"1 clip, r0=0.5, r=0.1, {len(log)} steps: reconstruction per-pixel MSE {per_pixel:.2e} (< 1e-2); "
                  f"encoder bit-identical after train={same}; decoder updated from pretrained init={omega_loaded}")


# 7 ---------------------------------------------------------------------------

ABLATION_STEPS = 400
ABLATION_CFG = """preset = mmnist
enc_channels = 16
hid_channels = 64
trans_depth = 2
batch_size = 4
epochs = 1000000
pretrain_epochs = 1000000
"""


@pytest.mark.slow
def test_criterion_7_ablation(tmp_path):
    cfg = str(tmp_path / "ablate.cfg")
    with open(cfg, "w") as fh:
        fh.write(ABLATION_CFG)
    data = str(tmp_path / "d.vseq")
    common = ["--config", cfg, "--seed", "0"]
    assert cli(["gen-data", *common, "--clips", "8", "-o", data]) == 0
    p = lambda n: str(tmp_path / n)
    pre_steps = ["--max-steps", str(ABLATION_STEPS)]
    tr_steps = ["--max-steps", str(ABLATION_STEPS)]
    runs = {
        "baseline": [["train", *common, "--data", data, "--no-pla", *tr_steps, "-o", p("base.plck")]],
        "+input-mask": [["pretrain", *common, "--data", data, "--no-sm", *pre_steps, "-o", p("pm.plck")],
                        ["train", *common, "--data", data, "--no-pla", "--init", p("pm.plck"), *tr_steps,
                         "-o", p("im.plck")]],
        "+input-mask+SM": [["pretrain", *common, "--data", data, *pre_steps, "-o", p("pms.plck")],
                           ["train", *common, "--data", data, "--no-pla", "--init", p("pms.plck"), *tr_steps,
                            "-o", p("ims.plck")]],
        "+PLA": [["train", *common, "--data", data, *tr_steps, "-o", p("pla.plck")]],
        "full": [["train", *common, "--data", data, "--init", p("pms.plck"), *tr_steps, "-o", p("full.plck")]],
    }
    finals, codes = {}, []
    for name, cmds in runs.items():
        for argv in cmds:
            codes.append(cli(argv))
        finals[name] = parse_log(open(cmds[-1][-1] + ".log").read())[-1].loss
    runnable = all(c == 0 for c in codes)
    ok = runnable and finals["full"] <= finals["baseline"]
    report(7, ok, "runnable=" + str(runnable) + "; final loss " +
           ", ".join(f"{k} {v:.2f}" for k, v in finals.items()) + " (full <= baseline)")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_metrics():
    rng = np.random.default_rng(8)
    x = rng.random((32, 32))
    self_err = abs(ssim(x, x) - 1)
    worst = 0.0
    for _ in range(20):
        a = rng.random((20, 24))
        b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.4), a.shape), 0, 1)
        worst = max(worst, abs(ssim(a, b) - ssim_bruteforce(a, b)))
    p_err = abs(psnr_from_mse(0.01) - 20.0)
    y = np.full((1, 1, 1, 64, 64), 0.25)
    exact = mse(y, y + 0.1) == pytest.approx(40.96, abs=1e-9) and mae(y, y + 0.1) == pytest.approx(409.6, abs=1e-9)
    ok = self_err <= 1e-9 and worst < 1e-6 and p_err <= 1e-9 and exact
    report(8, ok, f"|ssim(x,x)-1|={self_err:.1e}; ssim vs brute force max diff {worst:.1e} over 20 pairs; "
                  f"|psnr(0.01)-20|={p_err:.1e}; uniform-error MSE 40.96 / MAE 409.6 exact={exact}")


# 9 ---------------------------------------------------------------------------

DET_CFG = """preset = mmnist
height = 32
width = 32
t_in = 3
t_out = 3
enc_channels = 8
hid_channels = 16
trans_depth = 2
batch_size = 2
epochs = 3
pretrain_epochs = 2
"""


def _full_run(root):
    os.makedirs(root)
    cfg = os.path.join(root, "c.cfg")
    with open(cfg, "w") as fh:
        fh.write(DET_CFG)
    j = lambda n: os.path.join(root, n)
    common = ["--config", cfg, "--seed", "11"]
    assert cli(["gen-data", *common, "--clips", "4", "-o", j("d.vseq")]) == 0
    assert cli(["pretrain", *common, "--data", j("d.vseq"), "-o", j("pre.plck")]) == 0
    assert cli(["train", *common, "--data", j("d.vseq"), "--init", j("pre.plck"), "-o", j("m.plck")]) == 0
    return {n: open(j(n), "rb").read() for n in ("d.vseq", "pre.plck", "pre.plck.log", "m.plck", "m.plck.log")}


def test_criterion_9_determinism(tmp_path):
    # same command lines twice; the dataset path is part of the stored config
    root = str(tmp_path / "run")
    a = _full_run(root)
    shutil.rmtree(root)
    b = _full_run(root)
    same = {n: a[n] == b[n] for n in a}
    report(9, all(same.values()), "byte-identical across two seeded runs: " +
           ", ".join(f"{n}={v}" for n, v in same.items()))


# 10 --------------------------------------------------------------------------

def _raises(fn, exc, buf):
    try:
        fn(buf)
    except exc:
        return True
    return False


def test_criterion_10_formats(tmp_path):
    ds = gen_moving_shapes(2, 4, 32, 32, rng=Rng(3))
    path = str(tmp_path / "d.vseq")
    assert cli(["gen-data", "--preset", "taxibj", "--clips", "2", "-o", path]) == 0
    raw = open(path, "rb").read()
    vseq_ok = encode_dataset(load_dataset(path)) == raw and encode_dataset(decode_dataset(encode_dataset(ds))) == \
        encode_dataset(ds)

    tensors = {"phi.w": np.arange(6, dtype=np.float32).reshape(2, 3), "adam.t": np.array(2.0, np.float32)}
    ck_path = str(tmp_path / "m.plck")
    save_checkpoint(Checkpoint("trained", tensors, "seed = 1\n"), ck_path)
    ck_raw = open(ck_path, "rb").read()
    plck_ok = encode_checkpoint(load_checkpoint(ck_path)) == ck_raw

    errors = [
        _raises(decode_dataset, DatasetFormatError, b"XXXX" + raw[4:]),
        _raises(decode_dataset, DatasetFormatError, raw[:len(raw) // 2]),
        _raises(decode_dataset, DatasetFormatError, raw[:12]),
        _raises(decode_checkpoint, CheckpointError, b"XXXX" + ck_raw[4:]),
        _raises(decode_checkpoint, CheckpointError, ck_raw[:-5]),
        _raises(decode_checkpoint, CheckpointError, ck_raw[:8]),
    ]
    ok = vseq_ok and plck_ok and all(errors)
    report(10, ok, f"VSEQ byte-identical={vseq_ok}; PLCK byte-identical={plck_ok}; "
                   f"corrupt magic / truncation rejected {sum(errors)}/{len(errors)}")
