"""Leakage bound against the codebook constant, using variances estimated
from honest toy-task gradients at the initial model.

    python scripts/leakage_sweep.py --dim 128 --constants 0.1 1 10 100 1000
"""

import argparse
import math

import numpy as np

from maskedkrum.leakage import estimate_variances, mi_bound
from maskedkrum.trainer import ToyTask, honest_gradient


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=15)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--constants", type=float, nargs="+", default=[0.1, 1.0, 10.0, 100.0, 1000.0])
    args = p.parse_args(argv)

    task = ToyTask.generate(args.n, args.dim, seed=args.seed)
    w0 = np.zeros(args.dim)
    variances = estimate_variances([honest_gradient(task, i, w0) for i in range(1, args.n + 1)])
    print(f"mean per-coordinate variance {variances.mean():.4g} over {args.n} clients")
    print(f"{'C':>10} {'sigma':>10} {'nats':>12} {'bits':>12}")
    for c in args.constants:
        sigma = math.sqrt(c / (2 * args.dim))
        rep = mi_bound(variances, sigma, variance_source="estimated")
        print(f"{c:>10.4g} {sigma:>10.4g} {rep.per_client_bound:>12.5g} {rep.bits:>12.5g}")


if __name__ == "__main__":
    main()
