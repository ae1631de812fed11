"""Final toy-task loss for every attack kind under Multi-Krum and plain mean.

    python scripts/robustness_sweep.py --seeds 1 2 3 --rounds 200 --out sweep.csv
"""

import argparse
import csv
import sys

from maskedkrum import SystemConfig
from maskedkrum.trainer import ATTACK_KINDS, AttackModel, ToyTask, run_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=15)
    p.add_argument("--f", type=int, default=4)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--c", type=float, default=100.0)
    p.add_argument("--scale", type=float, default=10.0)
    p.add_argument("--rounds", type=int, default=200)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--out", default=None, help="CSV path; stdout if omitted")
    args = p.parse_args(argv)

    rows = []
    for kind in ATTACK_KINDS:
        attack = AttackModel(kind, args.scale)
        for seed in args.seeds:
            task = ToyTask.generate(args.n, args.dim, seed=seed)
            cfg = SystemConfig(n_clients=args.n, n_byzantine=args.f, dim=args.dim,
                               codebook_constant=args.c, seed=seed)
            for agg in ("multikrum", "plain_mean"):
                res = run_experiment(task, cfg, attack, agg, rounds=args.rounds)
                rows.append({"attack": kind, "seed": seed, "aggregator": agg,
                             "final_loss": repr(res.losses[-1]), "byz_selected": sum(res.byz_selected)})
            print(f"{kind:>9} seed={seed}: multikrum {float(rows[-2]['final_loss']):.4g}  "
                  f"plain_mean {float(rows[-1]['final_loss']):.4g}", file=sys.stderr)

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
