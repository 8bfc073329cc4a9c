"""Time the compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints the best wall time per call for each backend and the speed-up.  The
numba column is skipped when numba is missing or SPIDP_DISABLE_NUMBA is set.
"""

import argparse
import time

import numpy as np

from spidp import _kernels


def best_of(fn, repeat):
    fn()  # warm-up, also triggers compilation
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    data = rng.normal(size=(81, 81, 73))
    origin, res = np.array([-1.0, -1.0, -0.6]), 0.025
    pts = rng.uniform(-0.9, 0.9, (64 * 40, 3))
    spheres = np.column_stack([rng.uniform(-1, 1, (8, 3)), rng.uniform(0.05, 0.2, 8)])
    boxes = np.column_stack([rng.uniform(-1, 1, (8, 3)), rng.uniform(0.05, 0.2, (8, 3))])
    grid_pts = rng.uniform(-1, 1, (200_000, 3))
    offsets = rng.normal(size=(100_000, 2)) * 0.002
    return {
        "trilinear value+grad+hess (2560 pts)": lambda b: _kernels.trilinear(data, origin, res, pts, 2, backend=b),
        "neighbour gradient (2560 pts)": lambda b: _kernels.neighbor_gradient(data, origin, res, pts, backend=b),
        "primitive sdf (200k pts, 16 prims)": lambda b: _kernels.primitive_sdf(grid_pts, spheres, boxes, backend=b),
        "annulus hits (100k offsets)": lambda b: _kernels.annulus_hits(offsets, 0.001, 0.005, backend=b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"numba available: {_kernels.HAVE_NUMBA}")
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for name, fn in cases(rng).items():
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        if _kernels.HAVE_NUMBA:
            t_nb = best_of(lambda: fn("numba"), args.repeat)
            print(f"{name:40s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.1f}x")
        else:
            print(f"{name:40s} {1e3 * t_np:10.3f} {'-':>10s} {'-':>9s}")


if __name__ == "__main__":
    main()
