"""Time each kernel on both backends at desk sizes.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from ksvqe import kernels


def cases(rng):
    scores = rng.normal(size=(8, 9))
    noise = rng.normal(size=(8, 500, 9))
    frames = rng.random((8, 64, 64, 3))
    frags = rng.random((81, 8, 6, 6, 3))
    grid = rng.normal(size=(8, 9, 9))
    ratings = rng.integers(2, 11, (15, 300)) / 2
    mask = np.ones_like(ratings, dtype=bool)
    mean, std = ratings.mean(0), ratings.std(0, ddof=1)
    alpha, valid = np.full(300, 2.0), np.ones(300, dtype=bool)
    return {
        "perturbed_topk 8x500x9 k=1": lambda b: kernels.perturbed_topk_stats(scores, noise, 1, 0.5, backend=b),
        "window_means 8x9x9 w=3": lambda b: kernels.window_means(grid, 3, 1, backend=b),
        "block_dct_quantize 8x64x64x3": lambda b: kernels.block_dct_quantize(frames, 4, 0.05, backend=b),
        "fragment_stats 81x8x6x6x3": lambda b: kernels.fragment_stats(frags, backend=b),
        "bt500_counts 15x300": lambda b: kernels.bt500_counts(ratings, mask, mean, std, alpha, valid, backend=b),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        fn("numba")  # compile outside the timed loop
        times = {}
        for backend in ("numpy", "numba"):
            best = float("inf")
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                fn(backend)
                best = min(best, time.perf_counter() - t0)
            times[backend] = best * 1e3
        print(f"{name:32s} {times['numpy']:10.3f} {times['numba']:10.3f} {times['numpy'] / times['numba']:8.2f}")


if __name__ == "__main__":
    main()
