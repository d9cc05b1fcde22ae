"""Benchmark the compiled vs pure-numpy segment co-occurrence kernel.

The pair-count kernel is the hot inner loop of segment matching: it builds
the (gt x pred) intersection-count matrix from two index rasters. Run:

    python3 benchmarks/bench_kernels.py [--sizes 128,512,1024] [--repeats 7]

Both paths are timed in-process; the compiled path is warmed up first so
JIT compilation is excluded from the measurement.
"""

import argparse
import timeit

import numpy as np

from occlkit import _kernels


def make_inputs(side, n_gt=40, n_pred=40, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n_gt, size=side * side)
    b = rng.integers(0, n_pred, size=side * side)
    return a, b, n_gt, n_pred


def bench(fn, args, repeats):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeats))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="128,512,1024")
    parser.add_argument("--repeats", type=int, default=7)
    opts = parser.parse_args()
    sizes = [int(s) for s in opts.sizes.split(",")]

    paths = [("numpy", _kernels._pair_counts_np)]
    if _kernels.USE_NUMBA:
        warm = make_inputs(32)
        _kernels._pair_counts_nb(*warm)
        paths.append(("numba", _kernels._pair_counts_nb))
    else:
        print("compiled path unavailable (OCCLKIT_DISABLE_NUMBA=1 or "
              "numba missing); timing numpy only")

    header = f"{'side':>6} {'pixels':>10}" + "".join(
        f" {name + ' (ms)':>12}" for name, _ in paths)
    print(header)
    for side in sizes:
        args = make_inputs(side)
        row = f"{side:>6} {side * side:>10}"
        results = {}
        for name, fn in paths:
            t = bench(fn, args, opts.repeats)
            results[name] = t
            row += f" {t * 1e3:>12.3f}"
        if len(results) == 2:
            row += f"   speedup {results['numpy'] / results['numba']:.2f}x"
        for name, fn in paths[1:]:
            assert np.array_equal(fn(*args), paths[0][1](*args))
        print(row)


if __name__ == "__main__":
    main()
