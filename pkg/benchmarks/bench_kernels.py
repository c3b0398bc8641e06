"""Time the numba and pure-numpy paths of each hot kernel.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from jffra import kernels


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    frame = rng.random((128, 128, 3))
    flow = rng.uniform(-4, 4, (128, 128, 2))
    feat = rng.random((64, 64, 16))
    a = rng.random((6, 16, 32, 32)).astype(np.float32)
    b = rng.random((6, 16, 32, 32)).astype(np.float32)
    g = rng.standard_normal((6, 9, 9, 32, 32)).astype(np.float32)
    cases = {
        "warp_bilinear 128x128x3": lambda: kernels.warp_bilinear(frame, flow),
        "cost_volume_l1 64x64x16 r=4": lambda: kernels.cost_volume_l1(feat, feat, 4),
        "sad_search 128x128 b=8 r=8": lambda: kernels.sad_search(frame, frame, 8, 8),
        "cost_volume_forward 6x16x32x32": lambda: kernels.cost_volume_forward(a, b, 4),
        "cost_volume_backward 6x16x32x32": lambda: kernels.cost_volume_backward(g, a, b, 4),
    }
    saved = kernels.USE_NUMBA
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    try:
        for name, fn in cases.items():
            kernels.USE_NUMBA = True
            t_nb = _time(fn, args.repeat)
            kernels.USE_NUMBA = False
            t_np = _time(fn, args.repeat)
            print(f"{name:34s} {1e3 * t_nb:10.2f} {1e3 * t_np:10.2f} {t_np / t_nb:7.1f}x")
    finally:
        kernels.USE_NUMBA = saved


if __name__ == "__main__":
    main()
