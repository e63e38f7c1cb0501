"""Time the convolution kernels (compiled vs numpy) and the four aggregation schemes.

    python3 benchmarks/bench_kernels.py --kernels
    python3 benchmarks/bench_kernels.py --schemes --input-size 32 --frames 10
"""

import argparse
import time

import numpy as np

from mvecho import aggregation as A
from mvecho.engine import backend


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times) * 1e3


def bench_kernels(repeats, dtype):
    rng = np.random.default_rng(0)
    # a dw/pw stage of the default network: 64x64x64 input, 3x3 kernel
    xp = rng.random((8, 66, 66, 64)).astype(dtype)
    w = rng.random((3, 3, 64)).astype(dtype)
    g = rng.random((8, 64, 64, 64)).astype(dtype)
    x1 = rng.random((8, 130, 130, 5)).astype(dtype)
    cols = backend.kernels.im2col(x1, 3, 3, 2, 64, 64)
    cases = {
        "im2col 128x128x5 s2": lambda k: k.im2col(x1, 3, 3, 2, 64, 64),
        "col2im 128x128x5 s2": lambda k: k.col2im(cols, x1.shape, 3, 3, 2, 64, 64),
        "dw forward 64x64x64": lambda k: k.dw_forward(xp, w, 1, 64, 64),
        "dw backward 64x64x64": lambda k: k.dw_backward(xp, w, g, 1),
    }
    names = backend.available()
    print(f"{'kernel':<24}" + "".join(f"{n:>12}" for n in names) + "   (best ms)")
    prev = backend.name
    try:
        for label, fn in cases.items():
            row = []
            for n in names:
                backend.use(n)
                row.append(best_of(lambda: fn(backend.kernels), repeats))
            print(f"{label:<24}" + "".join(f"{t:12.2f}" for t in row))
    finally:
        backend.use(prev)


def bench_schemes(args):
    rng = np.random.default_rng(1)
    s = args.input_size
    studies = [
        A.StudyClips({v: rng.random((args.frames, s, s)).astype(np.float32) for v in range(5)})
        for _ in range(args.studies)
    ]
    print(f"{'scheme':<10}{'median ms/study':>18}")
    for scheme in A.SCHEMES:
        cfg = A.VideoConfig(scheme=scheme, input_size=s, conv_layers=args.conv_layers, width_multiplier=0.2,
                            fc1_units=1024, rnn_hidden=args.rnn_hidden)
        params = A.build_video_model(cfg, seed=0)
        A.video_predict(params, studies[:1])
        times = []
        for st in studies:
            t0 = time.perf_counter()
            A.video_predict(params, [st])
            times.append((time.perf_counter() - t0) * 1e3)
        print(f"{scheme:<10}{np.median(times):18.2f}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--kernels", action="store_true")
    p.add_argument("--schemes", action="store_true")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--input-size", type=int, default=32)
    p.add_argument("--conv-layers", type=int, default=3)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--studies", type=int, default=10)
    p.add_argument("--rnn-hidden", type=int, default=64)
    args = p.parse_args()
    if not (args.kernels or args.schemes):
        args.kernels = args.schemes = True
    if args.kernels:
        bench_kernels(args.repeats, np.dtype(args.dtype))
    if args.schemes:
        bench_schemes(args)


if __name__ == "__main__":
    main()
