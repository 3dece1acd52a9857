"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from hoitg import kernels


def _time(fn, args, repeat):
    fn(*args)  # warmup / jit compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    human = rng.normal(size=(1536, 3))
    objpts = rng.normal(size=(64, 3))
    cloud = rng.normal(size=(500, 3))
    grid = rng.normal(size=(128, 8, 8))
    u = rng.uniform(0, 7, size=172)
    v = rng.uniform(0, 7, size=172)
    dout = rng.normal(size=(172, 128))
    img = rng.normal(size=(5, 66, 66))
    cols = kernels.implementations()["numpy"]["im2col"](img, 3, 3, 2, 2, 32, 32)
    px = rng.uniform(0, 63, size=1600)
    py = rng.uniform(0, 63, size=1600)
    z = rng.normal(size=1600)
    big = rng.normal(size=1_000_000)

    cases = {
        "pairwise_distances": (human, human),
        "min_distances": (human, objpts),
        "nn_mean_distance": (human, human),
        "fps": (human, 96, 0),
        "gelu_forward": (big,),
        "gelu_grad": (big,),
        "bilinear_forward": (grid, u, v),
        "bilinear_backward": (grid, u, v, dout),
        "im2col": (img, 3, 3, 2, 2, 32, 32),
        "col2im": (cols, 5, 66, 66, 3, 3, 2, 2, 32, 32),
        "splat": (px, py, z, 64, 64),
    }

    impls = kernels.implementations()
    has_numba = impls["numba"] is not None
    print(f"active backend: {kernels.BACKEND} (numba available: {has_numba})")
    header = f"{'kernel':22s} {'numpy (ms)':>12s} {'numba (ms)':>12s} {'speedup':>9s}"
    print(header)
    print("-" * len(header))
    for name, case_args in cases.items():
        t_np = _time(impls["numpy"][name], case_args, args.repeat) * 1e3
        if has_numba:
            t_nb = _time(impls["numba"][name], case_args, args.repeat) * 1e3
            print(f"{name:22s} {t_np:12.3f} {t_nb:12.3f} {t_np / max(t_nb, 1e-9):8.1f}x")
        else:
            print(f"{name:22s} {t_np:12.3f} {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()
