"""Wall-clock of the worker distance kernel as N grows, serial vs threaded.

    MASKEDKRUM_THREADS=8 python scripts/distance_scaling.py --dim 4096
"""

import argparse
import os
import time

import numpy as np

from maskedkrum.core import pairwise_sq_dists


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dim", type=int, default=4096)
    p.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"{'N':>5} {'serial_s':>10} {'threaded_s':>11} {'identical':>10}")
    for n in args.sizes:
        x = rng.standard_normal((n, args.dim))
        serial = best_of(lambda: pairwise_sq_dists(x, threads=1), args.repeats)
        threaded = best_of(lambda: pairwise_sq_dists(x, threads=args.threads), args.repeats)
        same = np.array_equal(pairwise_sq_dists(x, threads=1), pairwise_sq_dists(x, threads=args.threads))
        print(f"{n:>5} {serial:>10.4f} {threaded:>11.4f} {str(same):>10}")


if __name__ == "__main__":
    main()
