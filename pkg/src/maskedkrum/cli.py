"""Command-line entry point.

Exit codes: 0 success, 1 validation or round failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .codebook import CodebookFormatError, NoiseCodebook, build_codebook, equivalent_sigma, verify_codebook
from .codec import decode_distances, encode_client_gradient, worker_pairwise_distances
from .core import GradientVector, SystemConfig, ValidationError
from .leakage import calibrate_sigma, estimate_variances, mi_bound
from .multikrum import check_resilience_precondition, multikrum
from .protocol import ProtocolSimulation, Scenario
from .trainer import AttackModel, ToyTask, apply_attack, run_experiment, write_loss_csv


def read_gradient_csv(path) -> List[GradientVector]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "client_id":
            raise ValidationError("gradient CSV must start with a 'client_id,v0,...' header")
        dim = len(header) - 1
        grads = []
        for line, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise ValidationError(f"line {line}: expected {dim + 1} fields, got {len(row)}")
            grads.append(GradientVector(int(row[0]), [float(x) for x in row[1:]]))
    if not grads:
        raise ValidationError("gradient CSV has no rows")
    return grads


def write_gradient_csv(path, grads) -> None:
    dim = grads[0].dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id"] + [f"v{k}" for k in range(dim)])
        for g in grads:
            writer.writerow([g.client_id] + [repr(float(x)) for x in g.values])


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def cmd_gen_codebook(args) -> int:
    cb = build_codebook(args.n, args.dim, args.c, args.seed)
    cb.save(args.out)
    print(f"wrote {args.out}: N={cb.n} d={cb.dim} C={cb.constant} seed={cb.seed}")
    return 0


def cmd_verify_codebook(args) -> int:
    report = verify_codebook(NoiseCodebook.load(args.path))
    print(_dump(report.as_dict()))
    return 0 if report.passed else 1


def cmd_leakage(args) -> int:
    if args.variances is not None:
        variances = np.array([float(x) for x in args.variances.split(",")])
        source = "declared"
    else:
        variances = estimate_variances(read_gradient_csv(args.grads))
        source = "estimated"
    if args.budget is not None:
        cal = calibrate_sigma(variances, args.budget)
        sigma = cal.sigma
    elif args.sigma is not None:
        sigma = args.sigma
    elif args.codebook is not None:
        sigma = equivalent_sigma(NoiseCodebook.load(args.codebook))
    else:
        raise ValidationError("one of --sigma, --codebook or --budget is required")
    out = mi_bound(variances, sigma, variance_source=source).as_dict()
    if args.budget is not None:
        out["budget_nats"] = args.budget
        out["unconstrained"] = cal.unconstrained
    print(_dump(out))
    return 0


def cmd_aggregate(args) -> int:
    grads = read_gradient_csv(args.grads)
    n = len(grads)
    if not check_resilience_precondition(n, args.f):
        raise ValidationError(f"N >= 2f+3 violated: N={n}, f={args.f}")
    cb = NoiseCodebook.load(args.codebook)
    if cb.n < n or cb.dim != grads[0].dim:
        raise ValidationError(f"codebook ({cb.n}x{cb.dim}) does not fit {n} gradients of dim {grads[0].dim}")
    ids = [g.client_id for g in grads]
    pairs = [encode_client_gradient(g, cb.row(k)) for k, g in enumerate(grads)]
    p1 = worker_pairwise_distances([p.share_plus for p in pairs], 1, ids=ids)
    p2 = worker_pairwise_distances([p.share_minus for p in pairs], 2, ids=ids)
    k = args.k if args.k is not None else n - args.f - 2
    sel = multikrum(decode_distances(p1, p2, cb.constant), args.f, k)
    print(_dump(sel.as_dict()))
    return 0


def _synthetic_source(sc: Scenario):
    """Honest clients draw N(mu, 1) around a per-run center; ids <= f attack."""
    attack = AttackModel.from_dict(sc.attack)
    base = np.random.default_rng(np.random.SeedSequence([sc.seed, 0x51])).standard_normal(sc.dim)

    def source(client_id: int, round_index: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([sc.seed, round_index, client_id]))
        g = GradientVector(client_id, base + rng.standard_normal(sc.dim))
        if client_id <= sc.n_byzantine:
            g = apply_attack(g, attack, rng)
        return g.values

    return source


def _write_outcomes(outcomes, audit_path, timings_path) -> None:
    with open(audit_path, "w") as fh:
        for out in outcomes:
            fh.write(json.dumps(out.audit_record(), sort_keys=True) + "\n")
    if timings_path is not None:
        with open(timings_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "phase", "microseconds"])
            for out in outcomes:
                for phase, us in out.timings.items():
                    writer.writerow([out.round_index, phase, us])


def cmd_simulate(args) -> int:
    sc = Scenario.load(args.config)
    cfg = sc.system_config()
    sim = ProtocolSimulation(cfg, _synthetic_source(sc))
    for r in range(sc.rounds):
        early, late = sc.drops_for(r)
        sim.run_round(r, drop_before_upload=early, drop_after_encoding=late)
    _write_outcomes(sim.outcomes, args.audit, args.timings)
    failed = [o for o in sim.outcomes if o.status != "ok"]
    for o in failed:
        print(f"round {o.round_index}: {o.status}: {o.reason}", file=sys.stderr)
    print(f"{len(sim.outcomes) - len(failed)}/{len(sim.outcomes)} rounds ok; audit log {args.audit}")
    return 1 if failed else 0


def cmd_train(args) -> int:
    sc = Scenario.load(args.config)
    cfg = sc.system_config()
    task = ToyTask.generate(sc.n_clients, sc.dim, sc.samples_per_client, seed=sc.seed,
                            learning_rate=sc.learning_rate)
    attack = AttackModel.from_dict(sc.attack)
    drops = {}
    for d in sc.dropouts:
        drops.setdefault(d["round"], []).append(d["client"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = [run_experiment(task, cfg, attack, agg, rounds=sc.rounds, dropouts=drops)
               for agg in args.aggregators]
    write_loss_csv(out_dir / "loss.csv", results)
    for res in results:
        _write_outcomes(res.outcomes, out_dir / f"audit_{res.aggregator}.jsonl",
                        out_dir / f"timings_{res.aggregator}.csv")
        print(f"{res.aggregator}: final loss {res.losses[-1]:.6g}, "
              f"byzantine selections {sum(res.byz_selected)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskedkrum", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-codebook", help="build a constant-distance noise codebook")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--c", type=float, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_codebook)

    v = sub.add_parser("verify-codebook", help="check every pair of a codebook file")
    v.add_argument("path")
    v.set_defaults(func=cmd_verify_codebook)

    lk = sub.add_parser("leakage", help="mutual-information leakage bound as JSON")
    src = lk.add_mutually_exclusive_group(required=True)
    src.add_argument("--variances", help="comma-separated per-coordinate variances")
    src.add_argument("--grads", help="gradient CSV to estimate variances from")
    scale = lk.add_mutually_exclusive_group()
    scale.add_argument("--sigma", type=float)
    scale.add_argument("--codebook", help="use the codebook's equivalent sigma")
    scale.add_argument("--budget", type=float, help="calibrate sigma to this many nats")
    lk.set_defaults(func=cmd_leakage)

    a = sub.add_parser("aggregate", help="encode, decode and run Multi-Krum on a gradient CSV")
    a.add_argument("--grads", required=True)
    a.add_argument("--f", type=int, required=True)
    a.add_argument("--k", type=int)
    a.add_argument("--codebook", required=True)
    a.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("simulate", help="run protocol rounds from a scenario JSON")
    s.add_argument("--config", required=True)
    s.add_argument("--audit", default="audit.jsonl")
    s.add_argument("--timings", default=None)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="federated training on the toy task")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", default="run")
    t.add_argument("--aggregators", nargs="+", choices=["multikrum", "plain_mean"],
                   default=["multikrum", "plain_mean"])
    t.set_defaults(func=cmd_train)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, CodebookFormatError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
