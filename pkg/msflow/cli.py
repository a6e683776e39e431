"""
Command line entry point: ``msflow run | check | refine | make-init | calibrate``.

Exit codes: 0 on success, 1 on input errors (bad config, missing or corrupt
files) or failed checks, 2 when a run completed with fallback steps.
"""

import argparse
import logging
import sys
from typing import List, Optional

from msflow import __version__
from msflow.config.logging_system import close_logger, setup_logger
from msflow.getters.shapes import SHAPES
from msflow.pipeline.grid_measure import Grid2D
from msflow.pipeline.pipeline_manager import (
    make_init_file,
    pipeline_calibrate,
    pipeline_check,
    pipeline_refine,
    pipeline_run,
)
from msflow.utils.errors import InputError

logger = logging.getLogger("<MSFLOW>")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_FALLBACK = 2


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_run(args: argparse.Namespace) -> int:
    setup_logger(args.out, args.verbose)
    try:
        result = pipeline_run(
            args.config,
            args.init,
            args.out,
            dump_steps=args.dump_plan or (),
            normalize=False if args.no_normalize else None,
        )
    except InputError as e:
        print(f"msflow run: {e}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        close_logger()
    if result.ledger.error is not None:
        print(f"msflow run: stopped early at {result.ledger.error}", file=sys.stderr)
        return EXIT_FALLBACK
    if result.had_fallback:
        print(f"msflow run: fallback at steps {result.ledger.fallback_steps}", file=sys.stderr)
        return EXIT_FALLBACK
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    setup_logger(args.log_dir, args.verbose)
    try:
        report = pipeline_check(args.ledger, args.report)
    except InputError as e:
        print(f"msflow check: {e}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        close_logger()
    if not report.passed:
        print(f"msflow check: failed {', '.join(report.failed_checks())}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_refine(args: argparse.Namespace) -> int:
    setup_logger(args.out, args.verbose)
    try:
        table = pipeline_refine(
            args.config,
            args.init,
            args.out,
            factors=args.factors,
            divisors=args.h_divisors,
            shape=args.shape,
        )
    except InputError as e:
        print(f"msflow refine: {e}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        close_logger()
    return EXIT_FALLBACK if (table["fallback_steps"] > 0).any() else EXIT_OK


def cmd_make_init(args: argparse.Namespace) -> int:
    setup_logger(None, args.verbose)
    try:
        grid = Grid2D.centered(args.nx, args.ny, args.cell_size)
        make_init_file(args.shape, grid, args.out, None if args.no_normalize else 1.0)
    except InputError as e:
        print(f"msflow make-init: {e}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        close_logger()
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    setup_logger(None, args.verbose)
    try:
        fits = pipeline_calibrate(args.out, args.resolutions, args.holder_run)
    except InputError as e:
        print(f"msflow calibrate: {e}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        close_logger()
    print(f"C_fit = {fits['interpolation']['c_fit']:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msflow",
        description="Wasserstein minimizing movements for the Mullins-Sekerka flow",
    )
    parser.add_argument("--version", action="version", version=f"msflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the flow and write ledger, snapshots and manifest")
    run.add_argument("--config", help="flat key = value config file")
    run.add_argument("--init", required=True, help="initial set (.pgm or i,j,value .csv)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument(
        "--dump-plan",
        type=_int_list,
        metavar="N[,N...]",
        help="write the transport plan of these steps as CSV",
    )
    run.add_argument("--no-normalize", action="store_true", help="keep the initial mass")
    run.set_defaults(func=cmd_run)

    check = sub.add_parser("check", help="verify a finished run")
    check.add_argument("--ledger", required=True, help="run directory")
    check.add_argument("--report", help="report CSV (default: <run>/report.csv)")
    check.add_argument("--log-dir", help="directory for log files")
    check.set_defaults(func=cmd_check)

    refine = sub.add_parser("refine", help="refinement study in space and time")
    refine.add_argument("--config", help="base config file")
    source = refine.add_mutually_exclusive_group(required=True)
    source.add_argument("--init", help="initial set on the base grid")
    source.add_argument("--shape", choices=SHAPES, help="reference shape rebuilt per level")
    refine.add_argument("--out", required=True, help="output directory")
    refine.add_argument("--factors", type=_int_list, default=[1, 2, 4], help="grid factors")
    refine.add_argument("--h-divisors", type=_int_list, default=[1, 2, 4], help="time-step divisors")
    refine.set_defaults(func=cmd_refine)

    make = sub.add_parser("make-init", help="write a reference initial set as PGM")
    make.add_argument("--shape", choices=SHAPES, required=True)
    make.add_argument("--nx", type=int, default=64)
    make.add_argument("--ny", type=int, default=64)
    make.add_argument("--cell-size", type=float, default=0.05)
    make.add_argument("--out", required=True, help="PGM path")
    make.add_argument("--no-normalize", action="store_true", help="skip the unit-mass rebalance")
    make.set_defaults(func=cmd_make_init)

    calibrate = sub.add_parser("calibrate", help="recompute frozen_fits.yaml")
    calibrate.add_argument("--out", help="target yaml (default: the packaged file)")
    calibrate.add_argument(
        "--resolutions", type=_int_list, default=[64, 128, 256], help="disk resolutions"
    )
    calibrate.add_argument("--holder-run", help="reference run directory for C'")
    calibrate.set_defaults(func=cmd_calibrate)

    for p in (run, check, refine, make, calibrate):
        p.add_argument("-v", "--verbose", action="store_true", help="debug output on the console")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
