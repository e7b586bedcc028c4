#!/usr/bin/env python3
"""
Multi-trial experiment execution and summary statistics.

Every (method, trial) pair is an independent job. On one-dimensional problems
a method's trials advance together as columns of one array. Work runs inline
or in a process pool; results are sorted by (method position, trial) before
they are summarized, so outputs never depend on scheduling order.

Seeds:
    init seed   derive_seed(base, trial)               shared by all methods (common random numbers)
    trial seed  derive_seed(base, fingerprint, trial)  the method's own randomness
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .errors import PreconditionError
from .experiment import ExperimentSpec
from .ndcore import derive_seed
from .optim import MethodSpec, TrialRecord, train, train_scalar_batch
from .problems import OneDimProblem, Problem, build_problem, grid_search_min

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SummaryRow:
    """Final-loss statistics of one method over its trials."""
    method: str
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    oracle_frac: float
    diverged: int
    mean_wall_ms: float
    trials: int
    failed: bool = False


@dataclass(frozen=True)
class TrialJob:
    method_index: int
    trial: int
    method: MethodSpec
    seed: int
    init_seed: int


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    records: list[TrialRecord]
    summaries: list[SummaryRow]
    oracle: Optional[tuple[float, float]] = None
    task_names: tuple[str, ...] = field(default_factory=tuple)

    @property
    def all_succeeded(self) -> bool:
        return all(not s.failed for s in self.summaries)

    def records_for(self, method: str) -> list[TrialRecord]:
        return [r for r in self.records if r.method == method]


def trial_seeds(base_seed: int, method: MethodSpec, trial: int) -> tuple[int, int]:
    """(trial seed, init seed) for one method's trial."""
    return derive_seed(base_seed, method.fingerprint(), trial), derive_seed(base_seed, trial)


def plan_jobs(spec: ExperimentSpec) -> list[TrialJob]:
    jobs = []
    for mi, method in enumerate(spec.methods):
        for t in range(spec.trials):
            seed, init_seed = trial_seeds(spec.seed, method, t)
            jobs.append(TrialJob(mi, t, method, seed, init_seed))
    return jobs


_PROBLEM_CACHE: dict[str, Problem] = {}


def _problem_for(name: str, params: dict[str, Any]) -> Problem:
    key = json.dumps([name, params], sort_keys=True)
    problem = _PROBLEM_CACHE.get(key)
    if problem is None:
        problem = build_problem(name, **dict(params))
        _PROBLEM_CACHE[key] = problem
    return problem


def batch_jobs(jobs: Sequence[TrialJob], one_dim: bool, workers: int = 1) -> list[list[TrialJob]]:
    """
    Group jobs into units of work.

    One-dimensional problems train each method's trials together, split into
    at most `workers` contiguous batches. Anything else runs one job per unit.
    """
    if not one_dim:
        return [[job] for job in jobs]
    by_method: dict[int, list[TrialJob]] = {}
    for job in jobs:
        by_method.setdefault(job.method_index, []).append(job)
    batches = []
    for group in by_method.values():
        size = math.ceil(len(group) / workers)
        batches.extend(group[i:i + size] for i in range(0, len(group), size))
    return batches


def _run_batch(batch: Sequence[TrialJob], problem_name: str, params: dict[str, Any], steps: int,
               keep_every: int, record_timing: bool) -> list[tuple[int, int, TrialRecord]]:
    problem = _problem_for(problem_name, params)
    if isinstance(problem, OneDimProblem):
        records = train_scalar_batch(problem, batch[0].method, steps, [j.seed for j in batch],
                                     [j.init_seed for j in batch], keep_every, record_timing)
    else:
        records = [
            train(problem, j.method, steps, j.seed, init_seed=j.init_seed,
                  keep_every=keep_every, record_timing=record_timing)
            for j in batch
        ]
    return [(j.method_index, j.trial, r) for j, r in zip(batch, records)]


def summarize(records: Sequence[TrialRecord], oracle_loss: Optional[float] = None,
              tol: float = 0.05, method: Optional[str] = None) -> SummaryRow:
    """
    Quantiles (linear interpolation) of the final losses of non-diverged trials.

    The oracle fraction counts trials, diverged ones included, whose final
    loss lies within `tol` of `oracle_loss`; it is NaN without an oracle.
    """
    if not records:
        raise PreconditionError("summarize needs at least one trial record")
    name = method or records[0].method
    finals = np.array([r.final_loss for r in records if not r.diverged], dtype=np.float64)
    n_div = sum(1 for r in records if r.diverged)
    wall = float(np.mean([r.wall_ms for r in records]))

    if oracle_loss is None:
        oracle_frac = math.nan
    else:
        hits = int(np.sum(np.abs(finals - oracle_loss) <= tol)) if finals.size else 0
        oracle_frac = hits / len(records)

    if finals.size == 0:
        nan = math.nan
        return SummaryRow(name, nan, nan, nan, nan, nan, nan, oracle_frac, n_div, wall, len(records), failed=True)

    q = np.quantile(finals, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return SummaryRow(
        method=name,
        min=float(q[0]),
        q1=float(q[1]),
        median=float(q[2]),
        q3=float(q[3]),
        max=float(q[4]),
        mean=float(finals.mean()),
        oracle_frac=oracle_frac,
        diverged=n_div,
        mean_wall_ms=wall,
        trials=len(records),
    )


def run_experiment(
    spec: ExperimentSpec,
    workers: int = 1,
    keep_every: int = 10,
    record_timing: bool = True,
    oracle_grid: tuple[float, float, float] = (-10.0, 10.0, 1e-4),
) -> ExperimentResult:
    """Run every (method, trial) pair of the spec and summarize each method."""
    if workers < 1:
        raise PreconditionError(f"workers must be >= 1, got {workers}")
    problem = _problem_for(spec.problem, spec.problem_params)
    oracle = None
    if isinstance(problem, OneDimProblem):
        oracle = grid_search_min(problem, *oracle_grid)
        logger.info("Oracle for %s: x*=%.6f L*=%.8f", problem.name, *oracle)

    jobs = plan_jobs(spec)
    batches = batch_jobs(jobs, isinstance(problem, OneDimProblem), workers)
    logger.info("Running %s: %d methods x %d trials on %d worker(s)",
                spec.name, len(spec.methods), spec.trials, workers)
    args = (spec.problem, spec.problem_params, spec.steps, keep_every, record_timing)

    if workers == 1:
        results = [item for batch in batches for item in _run_batch(batch, *args)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_batch, batch, *args) for batch in batches]
            results = [item for f in futures for item in f.result()]
    results.sort(key=lambda item: (item[0], item[1]))
    records = [r for _, _, r in results]

    summaries = []
    for method in spec.methods:
        row = summarize([r for r in records if r.method == method.name],
                        oracle[1] if oracle else None, spec.oracle_tol, method.name)
        if row.failed:
            logger.warning("Method %s failed: all %d trials diverged", method.name, row.trials)
        elif row.diverged:
            logger.warning("Method %s: %d of %d trials diverged", method.name, row.diverged, row.trials)
        logger.info("Summarized %s: median %.6g, oracle_frac %s", method.name, row.median, row.oracle_frac)
        summaries.append(row)

    return ExperimentResult(spec=spec, records=records, summaries=summaries,
                            oracle=oracle, task_names=problem.task_names)
