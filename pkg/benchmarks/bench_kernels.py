"""Compare the numba and numpy implementations of the batch box kernels.

    python3 benchmarks/bench_kernels.py [--sizes 1000 100000] [--repeat 5]

Reports the best-of-N wall time per kernel and size, and checks that both
paths return the same values.
"""

import argparse
import time

import numpy as np

from rcinstruct import _kernels as k


def random_boxes(rng, n):
    lo = rng.uniform(0, 0.9, size=(n, 2))
    hi = lo + rng.uniform(0.001, 0.1, size=(n, 2))
    return np.column_stack([lo[:, 0], lo[:, 1], hi[:, 0], hi[:, 1]])


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1_000, 100_000, 1_000_000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not k.NUMBA_AVAILABLE:
        print("numba is not installed; only the numpy path can run")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<16}{'n':>10}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for n in args.sizes:
        a, b = random_boxes(rng, n), random_boxes(rng, n)
        m = min(n, 2_000)  # pairwise is quadratic
        cases = {
            "areas": ((k._areas_numpy, getattr(k, "_areas_numba", None)), (a,)),
            "paired_iou": ((k._paired_iou_numpy, getattr(k, "_paired_iou_numba", None)), (a, b)),
            "quadrant_codes": ((k._quadrant_codes_numpy, getattr(k, "_quadrant_codes_numba", None)), (a[0], a)),
            "pairwise_iou": ((k._pairwise_iou_numpy, getattr(k, "_pairwise_iou_numba", None)), (a[:m], b[:m])),
        }
        for name, ((np_fn, nb_fn), fargs) in cases.items():
            size = m if name == "pairwise_iou" else n
            t_np, out_np = best_of(lambda: np_fn(*fargs), args.repeat)
            if nb_fn is None:
                print(f"{name:<16}{size:>10}{t_np * 1e3:>12.2f}{'-':>12}{'-':>10}")
                continue
            nb_fn(*fargs)  # compile outside the timing
            t_nb, out_nb = best_of(lambda: nb_fn(*fargs), args.repeat)
            if not np.allclose(out_np, out_nb):
                raise SystemExit(f"{name}: numba and numpy results differ at n={size}")
            print(f"{name:<16}{size:>10}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
