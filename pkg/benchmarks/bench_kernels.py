"""Time the numba and numpy paths of the hot kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--points 20000] [--dim 500] [--k 8] [--repeat 5]

The first numba call compiles (or loads the on-disk cache) and is timed
separately.  Each kernel's outputs are also checked for agreement.
"""

import argparse
import timeit

import numpy as np

from neurosig import _accel


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=20000)
    ap.add_argument("--dim", type=int, default=500)
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    X = rng.normal(size=(args.points, args.dim))
    C = rng.normal(size=(args.k, args.dim))
    labels = rng.integers(0, args.k, size=args.points)

    if not _accel.HAVE_NUMBA:
        print("numba not installed; only the numpy path is timed")

    cases = [
        ("nearest", lambda m: getattr(_accel, f"nearest_{m}")(X, C)),
        ("cluster_sums", lambda m: getattr(_accel, f"cluster_sums_{m}")(X, labels, args.k)),
        ("inertia", lambda m: getattr(_accel, f"inertia_{m}")(X, C, labels)),
    ]
    print(f"points={args.points} dim={args.dim} k={args.k} (best of {args.repeat})")
    print(f"{'kernel':<14}{'numpy s':>10}{'numba s':>10}{'first call':>12}{'speedup':>9}  agree")
    for name, run in cases:
        t_np = best_of(lambda: run("numpy"), args.repeat)
        ref = run("numpy")
        if _accel.HAVE_NUMBA:
            first = best_of(lambda: run("numba"), 1)
            t_nb = best_of(lambda: run("numba"), args.repeat)
            out = run("numba")
            pairs = zip(ref, out) if isinstance(ref, tuple) else [(ref, out)]
            agree = all(np.allclose(a, b, rtol=1e-10, atol=1e-8) for a, b in pairs)
            print(f"{name:<14}{t_np:>10.4f}{t_nb:>10.4f}{first:>12.4f}{t_np / t_nb:>8.2f}x  {agree}")
        else:
            print(f"{name:<14}{t_np:>10.4f}{'-':>10}{'-':>12}{'-':>9}  -")


if __name__ == "__main__":
    main()
