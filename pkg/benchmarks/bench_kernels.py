"""Time the numba and numpy kernel backends on detector-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import timeit

import numpy as np

from stcd import kernels


def cases(rng):
    xp = rng.normal(size=(16, 32, 34, 34))
    dcols = rng.normal(size=(16, 16, 16, 32, 3, 3))
    feat = rng.normal(size=(16, 64, 8, 8))
    flow = rng.uniform(-2, 2, size=(16, 2, 8, 8))
    gout = rng.normal(size=(16, 64, 8, 8))
    boxes = np.sort(rng.uniform(0, 64, size=(300, 4)).reshape(300, 2, 2), axis=1).transpose(0, 2, 1).reshape(300, 4)
    return {
        "im2col": (xp, 3, 2, 16, 16),
        "col2im": (dcols, 34, 34, 2),
        "bilinear_fwd": (feat, flow),
        "bilinear_bwd": (feat, flow, gout),
        "greedy_nms": (np.ascontiguousarray(boxes), 0.5, 10),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':14s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, inputs in cases(rng).items():
        npk, nbk = kernels.NUMPY_KERNELS[name], kernels.NUMBA_KERNELS[name]
        nbk(*inputs)  # compile
        t_np = min(timeit.repeat(lambda: npk(*inputs), number=1, repeat=args.repeats)) * 1e3
        t_nb = min(timeit.repeat(lambda: nbk(*inputs), number=1, repeat=args.repeats)) * 1e3
        print(f"{name:14s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
