"""Time the compiled and numpy kernel backends on training-sized batches.

    python3 benchmarks/bench_kernels.py [--batch 128] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from pixelrcnn import kernels
from pixelrcnn.layers import PixelRcnnModel, model_backward, model_forward
from pixelrcnn.tensor import RngState


def lstm_case(mod, N, dtype, rng):
    T, B, U = 9, 5, 32
    X = rng.standard_normal((N, T, B)).astype(dtype)
    Wx = (0.3 * rng.standard_normal((B, 4 * U))).astype(dtype)
    Wh = (0.3 * rng.standard_normal((U, 4 * U))).astype(dtype)
    b = np.zeros(4 * U, dtype)
    wc = (0.1 * rng.standard_normal((3, U))).astype(dtype)
    dY = rng.standard_normal((N, T, U)).astype(dtype)

    def fwd():
        return mod.lstm_forward(X, Wx, Wh, b, wc, True)

    gates, C, H = fwd()

    def bwd():
        return mod.lstm_backward(dY, X, Wx, Wh, wc, True, gates, C, H)

    return fwd, bwd


def conv_case(mod, N, dtype, rng, shape, wshape):
    x = rng.standard_normal((N, *shape)).astype(dtype)
    w = (0.2 * rng.standard_normal(wshape)).astype(dtype)
    b = np.zeros(wshape[-1], dtype)
    out = mod.conv2d_forward(x, w, b)
    dout = rng.standard_normal(out.shape).astype(dtype)
    return (lambda: mod.conv2d_forward(x, w, b)), (lambda: mod.conv2d_backward(dout, x, w))


def best_ms(fn, repeat):
    return 1e3 * min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    backends = kernels.available_backends()
    names = sorted(backends)
    print(f"batch={args.batch}  backends={names}  (best of {args.repeat}, milliseconds)")
    header = f"{'kernel':<24s}{'dtype':<9s}" + "".join(f"{n:>10s}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for dtype in (np.float32, np.float64):
        rows = {}
        for name in names:
            mod = backends[name]
            rng = np.random.default_rng(0)
            lf, lb = lstm_case(mod, args.batch, dtype, rng)
            c1f, c1b = conv_case(mod, args.batch, dtype, rng, (9, 9, 1), (3, 3, 1, 16))
            c2f, c2b = conv_case(mod, args.batch, dtype, rng, (7, 7, 16), (7, 7, 16, 32))
            for label, fn in [("lstm forward", lf), ("lstm backward", lb), ("conv1 forward", c1f),
                              ("conv1 backward", c1b), ("conv2 forward", c2f), ("conv2 backward", c2b)]:
                rows.setdefault(label, {})[name] = best_ms(fn, args.repeat)
        for label, t in rows.items():
            line = f"{label:<24s}{np.dtype(dtype).name:<9s}" + "".join(f"{t[n]:10.3f}" for n in names)
            if len(names) == 2:
                line += f"{t['python'] / t['cython']:9.1f}x"
            print(line)

    # whole forward+backward step through the active backend
    model = PixelRcnnModel.init(seed=0)
    X = np.random.default_rng(1).standard_normal((args.batch, 9, 5)).astype(np.float32)
    y = np.arange(args.batch) % 15
    rng = RngState(0)

    def step():
        _, cache = model_forward(model, X, "train", rng)
        model_backward(model, cache, y)

    print(f"full train step ({kernels.BACKEND}, float32): {best_ms(step, args.repeat):.3f} ms")


if __name__ == "__main__":
    main()
