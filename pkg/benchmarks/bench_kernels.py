"""Time each kernel and a full SGM pass under the numpy and numba backends.

Usage: python benchmarks/bench_kernels.py [--size 128] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from stereoroma import kernels
from stereoroma.frames import StereoFrame
from stereoroma.sgm import SgmParams, compute_raw_disparity


def cases(size, d_max):
    rng = np.random.default_rng(0)
    left, right = rng.random((size, size)), rng.random((size, size))
    cl, cr = kernels.census(left, 5), kernels.census(right, 5)
    cost = kernels.cost_volume(cl, cr, d_max, 24)
    disp = rng.uniform(0, d_max, (size, size))
    valid = rng.random((size, size)) > 0.2
    params = SgmParams(d_max=d_max)
    return {
        "census": lambda: kernels.census(left, 5),
        "cost_volume": lambda: kernels.cost_volume(cl, cr, d_max, 24),
        "aggregate_direction": lambda: kernels.aggregate_direction(cost, 1, 1, 8, 32),
        "warp_rows": lambda: kernels.warp_rows(left, disp),
        "region_sizes": lambda: kernels.region_sizes(np.round(disp / 4), valid, 1.0),
        "sgm": lambda: compute_raw_disparity(StereoFrame(left, right), params),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--d-max", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    results = {}
    for backend in ("numpy", "numba"):
        kernels.use_backend(backend)
        for name, fn in cases(args.size, args.d_max).items():
            fn()  # warm-up, includes numba compilation
            results[(backend, name)] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"{args.size}x{args.size}, d_max {args.d_max}, best of {args.repeat}")
    print(f"{'kernel':22s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for name in cases(8, 4):
        a, b = results[("numpy", name)], results[("numba", name)]
        print(f"{name:22s} {1e3 * a:10.2f} {1e3 * b:10.2f} {a / b:8.1f}x")


if __name__ == "__main__":
    main()
