"""Command line entry point: ``uavfl PLAN.yaml [-o OUT] [-j WORKERS] [-v]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .runner import PlanError, load_plan, run_plan


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uavfl", description="Run a UAV-assisted FL latency experiment plan.")
    p.add_argument("plan", type=Path, help="YAML experiment plan")
    p.add_argument("-o", "--out", default=None, help="output directory (overrides the plan's 'output')")
    p.add_argument("-j", "--workers", type=int, default=1, help="parallel worker processes (default 1)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.ERROR if args.quiet else [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("uavfl: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        plan = load_plan(args.plan.read_text(), output=args.out)
        result = run_plan(plan, workers=args.workers)
    except OSError as exc:
        print(f"uavfl: {exc}", file=sys.stderr)
        return 2
    except PlanError as exc:
        print(f"uavfl: invalid plan: {exc}", file=sys.stderr)
        return 2
    failed = result.failed
    total = len(result.cells)
    print(f"{total - len(failed)}/{total} cells ok; results in {result.output}")
    for c in failed:
        print(f"  failed: value={c.value} seed={c.seed} scheme={c.scheme}: {c.error}", file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
