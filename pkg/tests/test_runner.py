import csv
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from gradsurgery.emitter import SUMMARY_HEADER, TASKS_HEADER, TRAJ_HEADER, TRIALS_HEADER, emit
from gradsurgery.errors import EmitError, PreconditionError
from gradsurgery.experiment import parse_spec, parse_spec_text
from gradsurgery.optim import MethodSpec, TrialRecord
from gradsurgery.runner import batch_jobs, plan_jobs, run_experiment, summarize, trial_seeds

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"

SMALL = """
name: small
problem: sines
steps: 60
trials: 4
seed: 3
defaults:
  renormalize: false
  schedule: {kind: step, lr0: 0.2, decay_every: 20}
methods:
  - graddrop
  - naive
  - pcgrad
"""


def _record(loss, method="m", diverged=False, wall_ms=1.0):
    return TrialRecord(
        seed=0, method=method, fingerprint=0, trajectory=(loss,), final_task_losses=(loss,),
        final_w=(0.0,), keep_trace=(), wall_ms=wall_ms, diverged=diverged,
    )


def test_summarize_quartiles():
    row = summarize([_record(v) for v in (5.0, 1.0, 4.0, 2.0, 3.0)])
    assert (row.min, row.q1, row.median, row.q3, row.max) == (1.0, 2.0, 3.0, 4.0, 5.0)
    assert row.mean == 3.0
    assert math.isnan(row.oracle_frac)
    assert row.trials == 5 and row.diverged == 0 and not row.failed


def test_summarize_single_trial():
    row = summarize([_record(0.25)])
    assert row.min == row.q1 == row.median == row.q3 == row.max == 0.25


def test_summarize_oracle_fraction():
    losses = [0.0, 0.01, 0.04, 0.05, 0.1, 0.02, 0.03, 0.2, 0.5, 0.0]
    row = summarize([_record(v) for v in losses], oracle_loss=0.0, tol=0.05)
    assert row.oracle_frac == pytest.approx(0.7)


def test_summarize_counts_diverged_against_oracle_fraction():
    records = [_record(0.0), _record(0.0), _record(math.nan, diverged=True)]
    row = summarize(records, oracle_loss=0.0, tol=0.05)
    assert row.diverged == 1
    assert row.oracle_frac == pytest.approx(2 / 3)
    assert row.max == 0.0


def test_summarize_all_diverged_marks_failure():
    row = summarize([_record(math.nan, diverged=True) for _ in range(3)], oracle_loss=0.0)
    assert row.failed
    assert math.isnan(row.median)
    assert row.oracle_frac == 0.0


def test_summarize_needs_records():
    with pytest.raises(PreconditionError):
        summarize([])


def test_trial_seeds_share_init_across_methods():
    a, b = MethodSpec(name="a", kind="naive"), MethodSpec(name="b", kind="graddrop")
    assert trial_seeds(7, a, 3)[1] == trial_seeds(7, b, 3)[1]
    assert trial_seeds(7, a, 3)[0] != trial_seeds(7, b, 3)[0]
    assert trial_seeds(7, a, 3)[0] != trial_seeds(7, a, 4)[0]


def test_plan_covers_every_pair_in_order():
    spec = parse_spec_text(SMALL)
    jobs = plan_jobs(spec)
    assert [(j.method_index, j.trial) for j in jobs] == [(m, t) for m in range(3) for t in range(4)]


def test_renamed_identical_methods_get_identical_records():
    spec = parse_spec_text(
        "problem: sines\nsteps: 50\ntrials: 3\nmethods:\n"
        "  - {name: first, kind: graddrop}\n  - {name: second, kind: graddrop}\n"
    )
    result = run_experiment(spec, record_timing=False)
    first, second = result.records_for("first"), result.records_for("second")
    assert [r.trajectory for r in first] == [r.trajectory for r in second]
    assert [r.final_w for r in first] == [r.final_w for r in second]


def test_methods_start_from_common_points():
    result = run_experiment(parse_spec_text(SMALL), record_timing=False)
    starts = {}
    for r in result.records:
        starts.setdefault(r.init_seed, set()).add(r.trajectory[0])
    assert len(starts) == 4
    assert all(len(s) == 1 for s in starts.values())


def test_sines_run_has_oracle():
    result = run_experiment(parse_spec_text(SMALL), record_timing=False)
    assert result.oracle is not None
    assert all(0.0 <= s.oracle_frac <= 1.0 for s in result.summaries)
    assert result.all_succeeded
    assert result.task_names == ("sine1", "sine2", "sine3", "sine4", "sine5")


def test_worker_count_does_not_change_results():
    spec = parse_spec_text(SMALL)
    serial = run_experiment(spec, workers=1, record_timing=False)
    pooled = run_experiment(spec, workers=2, record_timing=False)
    assert serial.records == pooled.records
    assert serial.summaries == pooled.summaries


def test_run_rejects_zero_workers():
    with pytest.raises(PreconditionError):
        run_experiment(parse_spec_text(SMALL), workers=0)


def _rows(path):
    with path.open(newline="") as f:
        return list(csv.reader(f))


def test_emit_writes_every_file(tmp_path):
    result = run_experiment(parse_spec_text(SMALL), record_timing=False)
    paths = emit(result, tmp_path / "out", trajectory_trials=2)
    names = {p.name for p in paths}
    assert {"summary.csv", "trials.csv", "tasks.csv", "spec.resolved.json"} <= names
    assert {f"traj_{m}_{t}.csv" for m in ("graddrop", "naive", "pcgrad") for t in (0, 1)} <= names
    assert "traj_naive_2.csv" not in names

    out = tmp_path / "out"
    summary = _rows(out / "summary.csv")
    assert summary[0] == SUMMARY_HEADER
    assert [row[0] for row in summary[1:]] == ["graddrop", "naive", "pcgrad"]
    trials = _rows(out / "trials.csv")
    assert trials[0] == TRIALS_HEADER and len(trials) == 1 + 12
    tasks = _rows(out / "tasks.csv")
    assert tasks[0] == TASKS_HEADER and len(tasks) == 1 + 12 * 5
    assert all(row[4] == "" for row in tasks[1:])
    traj = _rows(out / "traj_graddrop_0.csv")
    assert traj[0] == TRAJ_HEADER and len(traj) == 1 + 61
    assert traj[1][2] != "" and traj[2][2] == ""
    assert b"\r\n" not in (out / "summary.csv").read_bytes()


def test_emit_replay_is_byte_identical(tmp_path):
    spec = parse_spec_text(SMALL)
    emit(run_experiment(spec, record_timing=False), tmp_path / "a")
    replayed = parse_spec(tmp_path / "a" / "spec.resolved.json")
    emit(run_experiment(replayed, workers=2, record_timing=False), tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_emit_transfer_reports_holdout(tmp_path):
    spec = parse_spec_text(
        "problem: {name: transfer, seed: 1, n_source: 32, n_transfer: 8, n_holdout: 8}\n"
        "steps: 10\ntrials: 2\nmethods:\n  - {name: gd, kind: graddrop, leaks: [1.0, 0.0]}\n"
    )
    result = run_experiment(spec, record_timing=False)
    assert result.oracle is None
    assert math.isnan(result.summaries[0].oracle_frac)
    emit(result, tmp_path)
    tasks = _rows(tmp_path / "tasks.csv")
    assert [row[2] for row in tasks[1:3]] == ["source", "transfer"]
    assert all(row[4] != "" for row in tasks[1:])
    summary = _rows(tmp_path / "summary.csv")
    assert summary[1][SUMMARY_HEADER.index("oracle_frac")] == "nan"


def test_emit_into_a_file_path_fails(tmp_path):
    blocker = tmp_path / "taken"
    blocker.write_text("x")
    result = run_experiment(parse_spec_text(SMALL).with_trials(1), record_timing=False)
    with pytest.raises(EmitError):
        emit(result, blocker / "out")


def test_batches_group_one_dimensional_trials_by_method():
    jobs = plan_jobs(parse_spec_text(SMALL))
    batches = batch_jobs(jobs, one_dim=True, workers=3)
    assert [[(j.method_index, j.trial) for j in b] for b in batches] == [
        [(m, 0), (m, 1)] if half == 0 else [(m, 2), (m, 3)] for m in range(3) for half in (0, 1)
    ]
    assert all(len({j.method_index for j in b}) == 1 for b in batch_jobs(jobs, one_dim=True, workers=1))
    assert batch_jobs(jobs, one_dim=False, workers=3) == [[j] for j in jobs]


def test_leak_sweep_replays_byte_identical(tmp_path):
    spec = replace(parse_spec(EXPERIMENTS / "transfer_leak_sweep.yaml").with_trials(2), steps=20)
    emit(run_experiment(spec, record_timing=False), tmp_path / "a")
    emit(run_experiment(spec, workers=2, record_timing=False), tmp_path / "b")
    first = (tmp_path / "a" / "tasks.csv").read_bytes()
    assert first == (tmp_path / "b" / "tasks.csv").read_bytes()

    transfer = {}
    for row in _rows(tmp_path / "a" / "tasks.csv")[1:]:
        if row[2] == "transfer":
            transfer.setdefault(row[0], []).append(row)
    assert list(transfer) == [m.name for m in spec.methods]
    for rows in transfer.values():
        assert len(rows) == 2
        assert all(math.isfinite(float(r[3])) and math.isfinite(float(r[4])) for r in rows)


@pytest.fixture(scope="module")
def sines_benchmark():
    spec = parse_spec(EXPERIMENTS / "sines_benchmark.yaml")
    started = time.perf_counter()
    result = run_experiment(spec, workers=1)
    return result, time.perf_counter() - started


def _median_change(records):
    return float(np.median([r.trajectory[-1] - r.trajectory[0] for r in records]))


@pytest.mark.slow
def test_sines_benchmark_fits_single_threaded_budget(sines_benchmark):
    result, seconds = sines_benchmark
    assert result.all_succeeded
    assert len(result.records) == 7 * 200
    assert seconds < 300.0


@pytest.mark.slow
def test_sines_benchmark_orders_methods(sines_benchmark):
    result, _ = sines_benchmark
    rows = {s.method: s for s in result.summaries}
    for baseline in ("naive", "clipping"):
        assert rows["graddrop"].median <= rows[baseline].median, baseline
    for baseline in ("naive", "clipping", "pcgrad", "iterative_pcgrad", "mgda"):
        assert rows["graddrop"].oracle_frac >= rows[baseline].oracle_frac, baseline


@pytest.mark.slow
def test_sines_benchmark_static_pcgrad_does_not_train(sines_benchmark):
    result, _ = sines_benchmark
    assert abs(_median_change(result.records_for("pcgrad"))) < 0.1


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="unrenormalized Random GradDrop settles in the deep basin more often "
                                       "on the five-sine toy; measured numbers in DESIGN.md")
def test_sines_benchmark_graddrop_beats_random_graddrop(sines_benchmark):
    result, _ = sines_benchmark
    rows = {s.method: s for s in result.summaries}
    assert rows["graddrop"].median <= rows["random_graddrop"].median
    assert rows["graddrop"].oracle_frac >= rows["random_graddrop"].oracle_frac


@pytest.mark.slow
def test_graddrop_step_costs_no_more_than_pcgrad_or_mgda_on_forty_heads():
    spec = parse_spec(EXPERIMENTS / "mlp_speed.yaml")
    keep = {"graddrop", "pcgrad", "mgda"}
    spec = replace(spec, methods=tuple(m for m in spec.methods if m.name in keep), steps=100)
    result = run_experiment(spec, workers=1)
    cost = {s.method: s.mean_wall_ms for s in result.summaries}
    assert cost.keys() == keep
    assert cost["graddrop"] <= cost["pcgrad"]
    assert cost["graddrop"] <= cost["mgda"]
