"""Command-line entry point (``aif``)."""
from __future__ import annotations

import argparse
import sys

from .bench import emit_report, generate_workload, read_trace, render_table, run_benchmark, write_trace
from .config import load_config
from .features import build_store, load_snapshot, random_update_events, save_snapshot
from .lsh import angular_calibration, write_calibration_csv
from .model import init_model
from .n2o import apply_incremental, load_table, rebuild_full, save_table
from .pipeline import Merger, equivalence_check


def _bench(args) -> int:
    cfg = load_config(args.config)
    report = run_benchmark(read_trace(args.trace), args.pipeline, args.mode, cfg=cfg,
                           precache=False if args.no_precache else None)
    if args.out:
        emit_report(report, args.out)
    print(render_table(report), end="")
    return 0


def _verify(args) -> int:
    cfg = load_config(args.config)
    merger = Merger(cfg)
    report = equivalence_check(merger, read_trace(args.trace), tolerance=args.tolerance)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} requests={len(report.rows)} max_abs_diff={report.max_abs_diff!r}")
    return 0 if report.passed else 1


def _lsh_calibrate(args) -> int:
    rows, err = angular_calibration(args.dim, args.pairs, args.mm_dim, args.seed, args.bins)
    if args.out:
        write_calibration_csv(rows, args.out)
    print(f"bits={args.dim} pairs={args.pairs} weighted_mean_abs_error={err:.6f}")
    return 0


def _n2o(args) -> int:
    store = load_snapshot(args.store)
    model = init_model(store.config)
    if args.action == "rebuild":
        table = rebuild_full(store, model)
    else:
        if not args.table:
            print("aif n2o apply: --table is required", file=sys.stderr)
            return 2
        base = load_table(args.table, model_version=model.model_version)
        table = apply_incremental(base, store.replay_log, store, model)
    save_table(table, args.out)
    print(f"{args.action}: {len(table)} entries written to {args.out}")
    return 0


def _gen_trace(args) -> int:
    trace = generate_workload(args.users, args.requests, args.seed, args.rate)
    write_trace(trace, args.out)
    print(f"{len(trace)} requests written to {args.out}")
    return 0


def _make_store(args) -> int:
    store = build_store(load_config(args.config))
    for ev in random_update_events(store, args.updates, args.seed):
        store.apply_item_update(ev)
    save_snapshot(store, args.out)
    print(f"store with {len(store)} items and {args.updates} updates written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aif", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="benchmark one pipeline over a trace")
    p.add_argument("--pipeline", choices=("sequential", "aif"), default="aif")
    p.add_argument("--trace", required=True)
    p.add_argument("--mode", choices=("virtual", "wall"), default="virtual")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--no-precache", action="store_true", help="disable subsequence pre-caching")
    p.set_defaults(func=_bench)

    p = sub.add_parser("verify", help="check sequential and async scores agree")
    p.add_argument("--trace", required=True)
    p.add_argument("--config")
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--out", help="write the per-request CSV report here")
    p.set_defaults(func=_verify)

    p = sub.add_parser("lsh-calibrate", help="signature similarity vs angle")
    p.add_argument("--dim", type=int, default=128, help="signature bits")
    p.add_argument("--pairs", type=int, default=10_000)
    p.add_argument("--mm-dim", type=int, default=64)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_lsh_calibrate)

    p = sub.add_parser("n2o", help="build or update an item index file")
    p.add_argument("action", choices=("rebuild", "apply"))
    p.add_argument("--store", required=True, help="store snapshot file")
    p.add_argument("--out", required=True)
    p.add_argument("--table", help="existing index file (apply only)")
    p.set_defaults(func=_n2o)

    p = sub.add_parser("gen-trace", help="generate a workload trace")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--requests", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=50.0, help="mean arrival rate (req/s)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_gen_trace)

    p = sub.add_parser("make-store", help="write a store snapshot with random updates")
    p.add_argument("--config")
    p.add_argument("--updates", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_make_store)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"aif {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
