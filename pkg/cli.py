#!/usr/bin/env python3
"""
Command-Line Interface for gradsurgery.

Runs experiment specs, the verification suites, and the toy global-minimum oracle.
"""

import argparse
import logging
import sys
from pathlib import Path

# Ensure repo root is on sys.path so `gradsurgery` can be imported as a package.
sys.path.insert(0, str(Path(__file__).parent))

from gradsurgery.commands import execute_command
from gradsurgery.config_loader import load_config
from gradsurgery.errors import ConfigError
from gradsurgery.verify import SUITE_ALIASES, SUITES

REPO_ROOT = Path(__file__).resolve().parent


def _configure_stdout() -> None:
    """Make CLI output robust on consoles with limited default encodings."""
    try:
        if hasattr(sys.stdout, "reconfigure"):
            sys.stdout.reconfigure(encoding="utf-8", errors="replace")
        if hasattr(sys.stderr, "reconfigure"):
            sys.stderr.reconfigure(encoding="utf-8", errors="replace")
    except Exception:
        pass


def print_header(message: str) -> None:
    print(f"\n{'=' * 70}")
    print(f"  {message}")
    print(f"{'=' * 70}\n")


def print_success(message: str) -> None:
    print(f"OK  {message}")


def print_info(message: str) -> None:
    print(f"INFO {message}")


def print_error(message: str) -> None:
    print(f"ERR {message}", file=sys.stderr)


def _load_context(args) -> dict | None:
    try:
        config = load_config(REPO_ROOT)
    except ConfigError as e:
        print_error(str(e))
        return None
    level = (getattr(args, "log_level", None) or config["logging"]["level"]).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=config["logging"]["format"])
    return {"cwd": Path.cwd(), "repo_root": REPO_ROOT, "config": config}


def _report(result) -> int:
    print(f"\n{result}")
    if result.data:
        print("\nResult Data:")
        for key, value in result.data.items():
            print(f"  {key}: {value}")
    return 0 if result.success else 1


def cmd_run(args):
    """Run an experiment spec."""
    ctx = _load_context(args)
    if ctx is None:
        return 1
    print_header(f"Running {args.spec}")
    result = execute_command(
        "run",
        {"spec": args.spec, "out": args.out, "workers": args.workers, "trials_override": args.trials_override},
        ctx,
    )
    return _report(result)


def cmd_verify(args):
    """Run verification suites."""
    ctx = _load_context(args)
    if ctx is None:
        return 1
    print_header(f"Verify: {args.suite}")
    result = execute_command("verify", {"suite": args.suite, "samples": args.samples, "seed": args.seed}, ctx)
    return _report(result)


def cmd_oracle(args):
    """Grid-search the global minimum of a toy problem."""
    ctx = _load_context(args)
    if ctx is None:
        return 1
    print_info(f"Searching {args.problem} for its global minimum")
    result = execute_command(
        "oracle", {"problem": args.problem, "lo": args.lo, "hi": args.hi, "step": args.step}, ctx
    )
    return _report(result)


def main():
    """Main CLI entry point."""
    _configure_stdout()
    parser = argparse.ArgumentParser(
        description="gradsurgery: multi-loss gradient combination experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Five-sine benchmark, 4 workers
  %(prog)s run experiments/sines_benchmark.yaml --workers 4

  # Quick pass with fewer trials into a scratch directory
  %(prog)s run experiments/sines_benchmark.yaml --trials-override 10 --out /tmp/sines

  # All verification suites at 10^5 samples
  %(prog)s verify --suite all --samples 100000

  # Update statistics against the closed forms
  %(prog)s verify --suite prop3

  # Global minimum of the five-sine sum loss
  %(prog)s oracle sines --lo -10 --hi 10 --step 1e-4
        """,
    )
    parser.add_argument("--log-level", help="Override logging.level (DEBUG, INFO, WARNING, ...)")

    subparsers = parser.add_subparsers(dest="command", help="Command to execute")

    run_parser = subparsers.add_parser("run", aliases=["r"], help="Run an experiment spec")
    run_parser.add_argument("spec", help="Path to an experiment spec (YAML or JSON)")
    run_parser.add_argument("--out", help="Output directory (default: <output.dir>/<spec name>)")
    run_parser.add_argument("--workers", type=int, help="Worker processes (default: runner.workers)")
    run_parser.add_argument("--trials-override", type=int, help="Replace the spec's trial count")
    run_parser.set_defaults(func=cmd_run)

    verify_parser = subparsers.add_parser("verify", aliases=["check"], help="Run verification suites")
    verify_parser.add_argument(
        "--suite",
        default="all",
        choices=[*SUITES, *SUITE_ALIASES, "all"],
        help="Suite to run; prop1..prop3, corollary or their descriptive aliases (default: all)",
    )
    verify_parser.add_argument("--samples", type=int, help="Monte Carlo samples (default: verify.samples)")
    verify_parser.add_argument("--seed", type=int, help="Base seed (default: verify.seed)")
    verify_parser.set_defaults(func=cmd_verify)

    oracle_parser = subparsers.add_parser("oracle", help="Global minimum of a one-dimensional problem")
    oracle_parser.add_argument("problem", nargs="?", default="sines", choices=["sines", "quad_pair"])
    oracle_parser.add_argument("--lo", type=float, help="Lower end of the search interval")
    oracle_parser.add_argument("--hi", type=float, help="Upper end of the search interval")
    oracle_parser.add_argument("--step", type=float, help="Grid spacing")
    oracle_parser.set_defaults(func=cmd_oracle)

    args = parser.parse_args()

    if not args.command:
        parser.print_help()
        return 1

    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
