#!/usr/bin/env python3
"""
Command router and handler registry for gradsurgery.

Routes CLI commands (run, verify, oracle) to handlers. Handlers take the
command's arguments and a context (repo root, loaded config) and return a
CommandResult; they never raise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

logger = logging.getLogger(__name__)


@dataclass
class CommandResult:
    """Result of command execution."""
    success: bool
    message: str
    data: Optional[Any] = None

    def __str__(self) -> str:
        status = "OK" if self.success else "ERR"
        return f"[{status}] {self.message}"


CommandHandler = Callable[[dict, dict], CommandResult]


class CommandRouter:
    """Routes commands to registered handlers."""

    def __init__(self):
        self._handlers: dict[str, CommandHandler] = {}

    def register(self, command: str, handler: CommandHandler) -> None:
        self._handlers[command] = handler

    def route(self, command: str, args: Optional[dict] = None, context: Optional[dict] = None) -> CommandResult:
        """
        Route a command to its handler.

        Any exception raised by the handler becomes a failed CommandResult.
        """
        handler = self._handlers.get(command)
        if not handler:
            return CommandResult(success=False, message=f"No handler registered for '{command}'")
        try:
            return handler(args or {}, context or {})
        except Exception as e:
            logger.debug("Handler %s raised", command, exc_info=True)
            return CommandResult(success=False, message=f"Handler error: {e}")

    def list_commands(self) -> list[str]:
        return sorted(self._handlers)


_global_router: Optional[CommandRouter] = None


def get_router() -> CommandRouter:
    """Get or create the global command router."""
    global _global_router
    if _global_router is None:
        _global_router = CommandRouter()
    return _global_router


def register_handler(command: str) -> Callable[[CommandHandler], CommandHandler]:
    """
    Decorator to register a command handler.

    Usage:
        @register_handler('run')
        def handle_run(args: dict, ctx: dict) -> CommandResult:
            ...
    """
    def decorator(func: CommandHandler) -> CommandHandler:
        get_router().register(command, func)
        return func
    return decorator


def execute_command(command: str, args: Optional[dict] = None, context: Optional[dict] = None) -> CommandResult:
    return get_router().route(command, args, context)


def _resolve_out_dir(args: dict, ctx: dict, spec) -> Path:
    if args.get("out"):
        return Path(args["out"])
    if spec.output_dir:
        return Path(spec.output_dir)
    config = ctx.get("config") or {}
    base = Path((config.get("output") or {}).get("dir", "runs"))
    if not base.is_absolute():
        base = Path(ctx.get("cwd", Path.cwd())) / base
    return base / spec.name


# Handlers

@register_handler("run")
def handle_run(args: dict, ctx: dict) -> CommandResult:
    """Run an experiment spec and write its CSV/JSON outputs."""
    from .emitter import emit
    from .experiment import parse_spec
    from .runner import run_experiment

    config = ctx.get("config") or {}
    runner_cfg = config.get("runner") or {}
    output_cfg = config.get("output") or {}
    oracle_cfg = config.get("oracle") or {}

    spec = parse_spec(Path(args["spec"]))
    if args.get("trials_override"):
        spec = spec.with_trials(int(args["trials_override"]))
    workers = int(args.get("workers") or runner_cfg.get("workers", 1))

    result = run_experiment(
        spec,
        workers=workers,
        keep_every=int(runner_cfg.get("keep_every", 10)),
        record_timing=bool(runner_cfg.get("record_timing", True)),
        oracle_grid=(float(oracle_cfg.get("lo", -10.0)), float(oracle_cfg.get("hi", 10.0)),
                     float(oracle_cfg.get("step", 1e-4))),
    )
    out_dir = _resolve_out_dir(args, ctx, spec)
    paths = emit(result, out_dir, trajectory_trials=int(output_cfg.get("trajectory_trials", 5)))

    failed = [s.method for s in result.summaries if s.failed]
    data = {
        "output": str(out_dir),
        "files": len(paths),
        **{s.method: f"median={s.median:.6g} oracle_frac={s.oracle_frac:.3f} diverged={s.diverged}"
           for s in result.summaries},
    }
    if result.oracle:
        data["oracle"] = f"x*={result.oracle[0]:.6f} L*={result.oracle[1]:.8f}"
    if failed:
        return CommandResult(False, f"{spec.name}: every trial diverged for {', '.join(failed)}", data)
    return CommandResult(True, f"{spec.name}: {len(spec.methods)} methods x {spec.trials} trials", data)


@register_handler("verify")
def handle_verify(args: dict, ctx: dict) -> CommandResult:
    """Run one verification suite (or all of them)."""
    from .verify import run_suite

    verify_cfg = (ctx.get("config") or {}).get("verify") or {}
    samples = int(args.get("samples") or verify_cfg.get("samples", 1_000_000))
    seed = int(args["seed"]) if args.get("seed") is not None else int(verify_cfg.get("seed", 2020))
    suites = run_suite(args.get("suite") or "all", samples=samples, seed=seed)

    data = {}
    for suite in suites:
        for check in suite.checks:
            status = "pass" if check.passed else "FAIL"
            data[f"{suite.name}: {check.name}"] = f"{status} {check.detail}".rstrip()
    n_checks = sum(len(s.checks) for s in suites)
    n_failed = sum(1 for s in suites for c in s.checks if not c.passed)
    if n_failed:
        return CommandResult(False, f"{n_failed} of {n_checks} checks failed", data)
    return CommandResult(True, f"All {n_checks} checks passed ({samples} samples, seed {seed})", data)


@register_handler("oracle")
def handle_oracle(args: dict, ctx: dict) -> CommandResult:
    """Grid-search global minimum of a one-dimensional problem's summed loss."""
    from .ndcore import Tensor
    from .problems import build_problem, grid_search_min

    oracle_cfg = (ctx.get("config") or {}).get("oracle") or {}

    def pick(key: str, default: float) -> float:
        value = args.get(key)
        return float(value) if value is not None else float(oracle_cfg.get(key, default))

    problem = build_problem(args.get("problem") or "sines")
    lo, hi, step = pick("lo", -10.0), pick("hi", 10.0), pick("step", 1e-4)
    x, loss = grid_search_min(problem, lo, hi, step)
    return CommandResult(
        True,
        f"{problem.name} global minimum on [{lo:g}, {hi:g}]",
        {"x*": repr(x), "L*": repr(loss), "task_losses": problem.eval(Tensor([x]))},
    )
