"""Command-line front end.

Subcommands cover the full planning workflow: synthesize a census,
build the constrained randomization pool, evaluate closed-form power,
run the simulation study, estimate baseline ICCs, and join simulated
rates against the formula. Exit codes: 0 success, 1 input or
validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import closed_form, engine, glmm_icc
from .census import (DEFAULT_PROFILES, generate_synthetic_census, load_census,
                     load_profiles, write_census)
from .errors import InputError, RunFailure
from .randomization import DEFAULT_SMD_THRESHOLD, build_pool, write_pool


class _Parser(argparse.ArgumentParser):
    # Flag misuse is a validation problem: exit 1, not argparse's 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crtsim",
                     description="Plan cluster randomized trials by simulation "
                                 "and closed-form power.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-census",
                       help="synthesize a village census from area profiles")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--profiles", metavar="PATH",
                     help="JSON array of 12 health-area profiles")
    src.add_argument("--default", action="store_true",
                     help="use the built-in 12-area profile set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_generate_census)

    p = sub.add_parser("build-pool",
                       help="build the constrained randomization pool")
    p.add_argument("--census", required=True, metavar="PATH")
    p.add_argument("--n-per-arm", required=True, type=int)
    p.add_argument("--attempts", required=True, type=int)
    p.add_argument("--threshold", type=float, default=DEFAULT_SMD_THRESHOLD)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_build_pool)

    p = sub.add_parser("power-formula",
                       help="closed-form power, optionally swept into CSVs")
    size = p.add_mutually_exclusive_group(required=True)
    size.add_argument("--m", type=float, help="children per cluster")
    size.add_argument("--villages-per-arm", type=int,
                      help="derive m from a per-arm village selection")
    p.add_argument("--c", type=int, default=6, help="clusters per arm")
    p.add_argument("--pi0", required=True, type=float)
    p.add_argument("--pi1", required=True, type=float)
    p.add_argument("--icc", required=True, type=float)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--children-per-village", type=float,
                   default=closed_form.DEFAULT_CHILDREN_PER_VILLAGE)
    p.add_argument("--n-clusters", type=int, default=closed_form.DEFAULT_N_CLUSTERS)
    p.add_argument("--curve", metavar="PATH",
                   help="write a cluster-size sweep CSV")
    p.add_argument("--m-max", type=int, default=500,
                   help="largest m in the --curve sweep")
    p.add_argument("--effect-curve", metavar="PATH",
                   help="write an effect-size sweep CSV at the given m")
    p.set_defaults(func=cmd_power_formula)

    p = sub.add_parser("simulate", help="run the simulation study grid")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--out", metavar="DIR",
                   help="output directory (overrides the config)")
    p.add_argument("--desk-scale", action="store_true",
                   help="reduced attempt and replicate counts")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: machine parallelism)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-icc",
                       help="estimate a baseline ICC from a census")
    p.add_argument("--census", required=True, metavar="PATH")
    p.add_argument("--level", choices=glmm_icc.LEVELS, default="village")
    p.add_argument("--n-quad", type=int, default=glmm_icc.DEFAULT_N_QUAD)
    p.add_argument("--out", metavar="PATH",
                   help="write the fit report JSON here instead of stdout")
    p.set_defaults(func=cmd_fit_icc)

    p = sub.add_parser("compare",
                       help="join simulated rates with closed-form power")
    p.add_argument("--sim", required=True, metavar="PATH",
                   help="results CSV from the simulate subcommand")
    p.add_argument("--icc", required=True, type=float,
                   help="ICC for the closed-form side")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--c", type=int, default=6)
    p.add_argument("--children-per-village", type=float,
                   default=closed_form.DEFAULT_CHILDREN_PER_VILLAGE)
    p.add_argument("--n-clusters", type=int, default=closed_form.DEFAULT_N_CLUSTERS)
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_compare)
    return parser


def cmd_generate_census(args) -> int:
    profiles = DEFAULT_PROFILES if args.default else load_profiles(args.profiles)
    census = generate_synthetic_census(profiles, seed=args.seed)
    write_census(census, args.out)
    print(f"wrote {len(census.villages)} villages "
          f"({len(census.analysis_villages)} analysis-eligible) in "
          f"{len(census.health_areas)} areas to {args.out}")
    return 0


def cmd_build_pool(args) -> int:
    census = load_census(args.census, require_expected_areas=True)
    pool = build_pool(census, args.n_per_arm, args.attempts,
                      threshold=args.threshold, seed=args.seed)
    write_pool(pool, args.out)
    print(f"accepted {len(pool.draws)} of {args.attempts} draws "
          f"(avg SMD <= {args.threshold}) to {args.out}")
    return 0


def cmd_power_formula(args) -> int:
    try:
        if args.m is not None:
            m = args.m
        else:
            m = closed_form.cluster_size(args.villages_per_arm,
                                         args.children_per_village,
                                         args.n_clusters)
        inputs = closed_form.PowerInputs(m=m, c=args.c, pi0=args.pi0,
                                         pi1=args.pi1, icc=args.icc,
                                         alpha=args.alpha)
        p = closed_form.power(inputs)
        if args.curve:
            rows = closed_form.power_curve_rows(
                range(1, args.m_max + 1), args.c, args.pi0, args.pi1,
                args.icc, args.alpha)
            closed_form.write_power_curve(rows, args.curve)
        if args.effect_curve:
            deltas = np.round(np.arange(0.0, 0.3001, 0.005), 10)
            rows = closed_form.effect_curve_rows(m, args.c, args.pi0, deltas,
                                                 args.icc, args.alpha)
            closed_form.write_power_curve(rows, args.effect_curve)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    print(f"{p:.3f}")
    return 0


def cmd_simulate(args) -> int:
    config = engine.load_study_config(args.config, desk_scale=args.desk_scale,
                                      output_dir=args.out)
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    if workers < 1:
        raise InputError(f"--workers must be >= 1, got {workers}")
    result = engine.run_study(config, workers=workers, log=print)
    print(f"wrote {result.results_csv} and {result.summary_json}")
    return 0


def cmd_fit_icc(args) -> int:
    census = load_census(args.census)
    fit = glmm_icc.fit_random_intercept(census, level=args.level,
                                        n_quad=args.n_quad)
    if args.out:
        glmm_icc.write_report(fit, args.out)
        print(f"wrote {args.out}")
    else:
        print(json.dumps(fit.report(), indent=2, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    rows = engine.load_results(args.sim)
    formula: dict[tuple, float] = {}
    for row in rows:
        key = (row["n_per_arm"], row["cer"], row["delta"])
        if key in formula:
            continue
        pi1 = row["cer"] + row["delta"]
        if not 0.0 < pi1 < 1.0:
            continue
        try:
            m = closed_form.cluster_size(row["n_per_arm"],
                                         args.children_per_village,
                                         args.n_clusters)
            formula[key] = closed_form.power(closed_form.PowerInputs(
                m=m, c=args.c, pi0=row["cer"], pi1=pi1,
                icc=args.icc, alpha=args.alpha))
        except ValueError as exc:
            raise InputError(str(exc)) from None
    table, unmatched = engine.compare_report(rows, formula)
    engine.write_compare(table, args.out)
    for key in unmatched:
        print(f"warning: no closed-form match for n_per_arm={key[0]} "
              f"cer={key[1]} delta={key[2]}", file=sys.stderr)
    print(f"wrote {len(table)} comparison rows to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
