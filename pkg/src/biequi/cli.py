"""Command-line interface.

Subcommands: ``register``, ``selftest``, ``bench``, ``synth`` and
``init-weights``. Exit status is 0 on success, 1 on a runtime error or a
failed self-test and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .bench import PairRecord, default_jobs, gen_synthetic_pair, run_benchmark
from .errors import BiequiError
from .io import (read_gt_log, read_matches, read_pairs, read_scan, read_transform_json, transform_record,
                 write_json, write_synthetic)
from .params import ModelConfig, init_params, load_archive, save_archive
from .registration import RegisterOptions, iterative_refine, register_pair
from .selftest import SUITES, run_selftest


def _int_at_least(low):
    def parse(text):
        value = int(text)
        if value < low:
            raise argparse.ArgumentTypeError(f"must be at least {low}")
        return value
    return parse


_positive_int = _int_at_least(1)
_count = _int_at_least(0)


def build_parser():
    parser = argparse.ArgumentParser(prog="biequi", description="Bi-equivariant point cloud registration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a source scan onto a reference scan")
    p.add_argument("--ref", required=True, help="reference scan (.ply or .xyz)")
    p.add_argument("--src", required=True, help="source scan (.ply or .xyz)")
    p.add_argument("--weights", required=True, help="weight archive (.bqf)")
    p.add_argument("--out", required=True, help="output transform JSON")
    p.add_argument("--refine", type=_count, default=0, metavar="N", help="refinement steps (default 0)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gt", help="ground-truth transform JSON; adds rre_deg, rte_m and rmse_m")
    p.add_argument("--oracle-matches", help="planted matches JSON; bypasses learned matching")
    p.add_argument("--max-points", type=_positive_int)

    p = sub.add_parser("selftest", help="run the equivariance property suite")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)

    p = sub.add_parser("bench", help="evaluate registration over a list of pairs")
    p.add_argument("--pairs", required=True, help="ref<TAB>src[<TAB>overlap] per line")
    p.add_argument("--gt", required=True, help="ground-truth log, one record per pair line")
    p.add_argument("--weights", required=True)
    p.add_argument("--augment", choices=("none", "54"), default="none")
    p.add_argument("--augment-mode", choices=("split", "joint"), default="split")
    p.add_argument("--report", required=True, help="output report JSON")
    p.add_argument("--csv", help="optional per-config CSV")
    p.add_argument("--jobs", type=_positive_int, default=None, help="worker threads (default $BQF_NUM_JOBS or 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--refine", type=_count, default=0, metavar="N")

    p = sub.add_parser("synth", help="write a synthetic scan pair with planted matches")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=_positive_int, default=2000)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("init-weights", help="write seeded random weights")
    p.add_argument("--config", help="model config JSON (defaults when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def _register(args):
    params = load_archive(args.weights)
    ref = read_scan(args.ref).points
    src = read_scan(args.src).points
    oracle = read_matches(args.oracle_matches) if args.oracle_matches else None
    opts = RegisterOptions(seed=args.seed, max_points=args.max_points, oracle_matches=oracle)
    res = register_pair(params, ref, src, opts)
    if res.success and args.refine:
        res = iterative_refine(params, res, ref, src, args.refine, opts)
    if not res.success:
        write_json(args.out, {"matrix": None, "failure": res.failure})
        print(f"registration failed: {res.failure}", file=sys.stderr)
        return 1
    gt = read_transform_json(args.gt) if args.gt else None
    write_json(args.out, transform_record(res.transform, gt, src))
    return 0


def _selftest(args):
    failed = 0
    for result in run_selftest(args.suite, args.seed, args.tol):
        print(result.line())
        failed += not result.passed
    return 1 if failed else 0


def _bench(args):
    params = load_archive(args.weights)
    pairs = read_pairs(args.pairs)
    log = read_gt_log(args.gt)
    if len(log) != len(pairs):
        raise BiequiError(f"{args.pairs} lists {len(pairs)} pairs but {args.gt} has {len(log)} records")
    records = [PairRecord(ref, src, entry.transform, overlap) for (ref, src, overlap), entry in zip(pairs, log)]
    report = run_benchmark(params, records, lambda path: read_scan(path).points, augment=args.augment,
                           augment_mode=args.augment_mode, seed=args.seed, jobs=args.jobs or default_jobs(),
                           refine=args.refine)
    write_json(args.report, report.to_dict())
    if args.csv:
        cols = ["pair", "config", "success", "recall", "ir", "rmse_m", "rre_deg", "rte_m"]
        with open(args.csv, "w") as f:
            f.write(",".join(cols) + "\n")
            for i, pair in enumerate(report.pairs):
                for j, row in enumerate(pair["configs"]):
                    vals = [i, j] + [row[c] for c in cols[2:]]
                    f.write(",".join("" if v is None else repr(v) for v in vals) + "\n")
    print(f"mean_rr {report.mean_rr:.4f} robust_rr {report.robust_rr:.4f} "
          f"mean_ir {report.mean_ir:.4f} robust_ir {report.robust_ir:.4f}")
    return 0


def _synth(args):
    write_synthetic(args.out, gen_synthetic_pair(args.seed, args.points, args.overlap, args.noise))
    return 0


def _init_weights(args):
    config = ModelConfig()
    if args.config:
        with open(args.config) as f:
            config = ModelConfig.from_dict(json.load(f))
    save_archive(init_params(config, args.seed), args.out)
    return 0


COMMANDS = {"register": _register, "selftest": _selftest, "bench": _bench, "synth": _synth,
            "init-weights": _init_weights}


def cli_main(argv=None):
    """Run the CLI with ``argv`` (defaults to ``sys.argv[1:]``) and return
    the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (BiequiError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
