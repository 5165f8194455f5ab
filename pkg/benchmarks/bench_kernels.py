"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--step]

Each kernel runs on shapes taken from the reduced Moving-MNIST model
(C~=16, C^=64, 64x64 frames). ``--step`` also times one full training step
(forward, backward, Adam) under each backend.
"""

import argparse
import time

import numpy as np

from plasm import _kernels_py, kernels


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng):
    x_enc = rng.standard_normal((40, 16, 64, 64)).astype(np.float32)
    x_trans = rng.standard_normal((4, 64, 16, 16)).astype(np.float32)
    x_wide = rng.standard_normal((4, 256, 16, 16)).astype(np.float32)
    w_dw = rng.standard_normal((64, 7, 7)).astype(np.float32)
    g16 = np.ones(16, np.float32)
    cols = kernels.im2col(x_enc[:8], 3, 1, 1)
    xhat = x_enc.copy()
    inv = np.ones((40, 2), np.float32)
    g256, b256 = np.ones(256, np.float32), np.zeros(256, np.float32)
    return [
        ("im2col 8x16x64x64 k3", lambda m: m.im2col(x_enc[:8], 3, 1, 1)),
        ("col2im 8x16x64x64 k3", lambda m: m.col2im(cols, 16, 64, 64, 3, 1, 1)),
        ("dwconv fwd 4x64x16x16 k7", lambda m: m.dwconv_forward(x_trans, w_dw, 3)),
        ("dwconv bwd 4x64x16x16 k7", lambda m: m.dwconv_backward(x_trans, w_dw, x_trans, 3)),
        ("gn+lrelu fwd 40x16x64x64", lambda m: m.gn_act_forward(x_enc, g16, g16, 2, 1e-5, 0.01)),
        ("gn+lrelu bwd 40x16x64x64", lambda m: m.gn_act_backward(x_enc, xhat, inv, g16, g16, 2, 0.01)),
        ("gn fwd 4x256x16x16", lambda m: m.gn_act_forward(x_wide, g256, b256, 2, 1e-5, 1.0)),
    ]


def train_step_time(repeat):
    from plasm.config import preset
    from plasm.dataio import gen_moving_shapes
    from plasm.rng import Rng
    from plasm.pipeline import train

    cfg = preset("mmnist", enc_channels=16, hid_channels=64, trans_depth=2, batch_size=4, epochs=10**6)
    ds = gen_moving_shapes(4, 20, 64, 64, rng=Rng(0))

    def run():
        train(ds, cfg, max_steps=3)

    return best_of(run, repeat) / 3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="also time a full training step")
    args = ap.parse_args()

    if not kernels.native_available():
        raise SystemExit("compiled extension not built; run: python3 setup.py build_ext --inplace")
    from plasm import _kernels as native

    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'python ms':>10s} {'native ms':>10s} {'speedup':>8s}")
    for name, call in kernel_cases(rng):
        tp = best_of(lambda: call(_kernels_py), args.repeat)
        tn = best_of(lambda: call(native), args.repeat)
        print(f"{name:28s} {tp * 1e3:10.2f} {tn * 1e3:10.2f} {tp / tn:7.2f}x")

    if args.step:
        before = kernels.BACKEND
        results = {}
        for backend in ("python", "native"):
            kernels.use(backend)
            results[backend] = train_step_time(max(1, args.repeat // 2))
        kernels.use(before)
        tp, tn = results["python"], results["native"]
        print(f"{'train step (incl. setup)':28s} {tp * 1e3:10.1f} {tn * 1e3:10.1f} {tp / tn:7.2f}x")


if __name__ == "__main__":
    main()
