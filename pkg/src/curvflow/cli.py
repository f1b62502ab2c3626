"""Command line interface.

    curvflow run <config.json>      execute a flow scenario
    curvflow branch <config.json>   continue the static solution branch
    curvflow selftest               run the built-in invariant battery

Exit codes: 0 on success, 1 on a failed scenario assertion or selftest
check, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import harness
from .errors import CurvflowError
from .selftest import run_selftest


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", help="path to a JSON experiment configuration")
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curvflow",
        description="volume-constrained curvature-prescription flow laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="execute a flow scenario"))
    _add_common(sub.add_parser("branch", help="continue the static branch"))
    st = sub.add_parser("selftest", help="run the invariant battery")
    st.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "selftest":
        return run_selftest(quiet=args.quiet)
    try:
        cfg = harness.load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.command == "run":
            passed = harness.run_scenario(cfg, args.out, quiet=args.quiet)
        else:
            passed = harness.run_branch(cfg, args.out, quiet=args.quiet)
    except harness.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except CurvflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0 if passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
