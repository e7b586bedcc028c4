#!/usr/bin/env python3
"""
CSV and JSON output for experiment results.

Files written into the output directory:

    summary.csv          one row per method
    trials.csv           one row per (method, trial)
    tasks.csv            per-task final (and held-out) losses per trial
    traj_<m>_<t>.csv     step, sum_loss, keep_fraction for the first N trials per method
    spec.resolved.json   the fully-defaulted spec; parse it to replay the run

Floats are written with repr() so replays compare byte-for-byte. Lines end in LF.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmitError
from .experiment import file_stem
from .runner import ExperimentResult

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ["method", "min", "q1", "median", "q3", "max", "mean", "oracle_frac", "diverged", "mean_wall_ms"]
TRIALS_HEADER = ["method", "trial", "seed", "final_loss", "diverged", "wall_ms"]
TASKS_HEADER = ["method", "trial", "task", "final_loss", "holdout_loss", "final_grad_norm"]
TRAJ_HEADER = ["step", "sum_loss", "keep_fraction"]


def _fmt(value: float) -> str:
    value = float(value)
    if math.isnan(value):
        return "nan"
    return repr(value)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    try:
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise EmitError(path, e.strerror or str(e)) from e
    return path


def _trial_index(result: ExperimentResult) -> list[tuple[str, int, object]]:
    """(method, trial, record) in emission order."""
    out = []
    counters: dict[str, int] = {}
    for r in result.records:
        t = counters.get(r.method, 0)
        counters[r.method] = t + 1
        out.append((r.method, t, r))
    return out


def emit(result: ExperimentResult, out_dir: Path, trajectory_trials: int = 5) -> list[Path]:
    """Write every output file for `result` into `out_dir` and return their paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise EmitError(out_dir, e.strerror or str(e)) from e

    written = [
        _write_csv(out_dir / "summary.csv", SUMMARY_HEADER, (
            [s.method, _fmt(s.min), _fmt(s.q1), _fmt(s.median), _fmt(s.q3), _fmt(s.max),
             _fmt(s.mean), _fmt(s.oracle_frac), str(s.diverged), _fmt(s.mean_wall_ms)]
            for s in result.summaries
        ))
    ]

    indexed = _trial_index(result)
    written.append(_write_csv(out_dir / "trials.csv", TRIALS_HEADER, (
        [m, str(t), str(r.seed), _fmt(r.final_loss), str(int(r.diverged)), _fmt(r.wall_ms)]
        for m, t, r in indexed
    )))

    names = result.task_names
    task_rows = []
    for m, t, r in indexed:
        for i, loss in enumerate(r.final_task_losses):
            holdout = _fmt(r.holdout_losses[i]) if r.holdout_losses is not None else ""
            norm = _fmt(r.final_task_grad_norms[i]) if i < len(r.final_task_grad_norms) else ""
            task = names[i] if i < len(names) else f"task{i + 1}"
            task_rows.append([m, str(t), task, _fmt(loss), holdout, norm])
    written.append(_write_csv(out_dir / "tasks.csv", TASKS_HEADER, task_rows))

    for m, t, r in indexed:
        if t >= trajectory_trials:
            continue
        keeps = dict(r.keep_trace)
        written.append(_write_csv(out_dir / f"traj_{file_stem(m)}_{t}.csv", TRAJ_HEADER, (
            [str(step), _fmt(loss), _fmt(keeps[step]) if step in keeps else ""]
            for step, loss in enumerate(r.trajectory)
        )))

    resolved = out_dir / "spec.resolved.json"
    try:
        resolved.write_text(json.dumps(result.spec.to_dict(), indent=2) + "\n", encoding="utf-8", newline="\n")
    except OSError as e:
        raise EmitError(resolved, e.strerror or str(e)) from e
    written.append(resolved)

    logger.info("Wrote %d files to %s", len(written), out_dir)
    return written
