import json
from pathlib import Path

import pytest

from gradsurgery.errors import ConfigError, SpecParseError
from gradsurgery.experiment import (
    DEFAULT_ORACLE_TOL,
    DEFAULT_SEED,
    DEFAULT_STEPS,
    DEFAULT_TRIALS,
    file_stem,
    parse_spec,
    parse_spec_text,
)
from gradsurgery.optim import Schedule

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"


def test_minimal_spec_gets_defaults():
    spec = parse_spec(EXPERIMENTS / "sines_minimal.yaml")
    assert spec.name == "sines_minimal"
    assert spec.steps == DEFAULT_STEPS and spec.trials == DEFAULT_TRIALS
    assert spec.seed == DEFAULT_SEED and spec.oracle_tol == DEFAULT_ORACLE_TOL
    (method,) = spec.methods
    assert method.name == "graddrop" and method.kind == "graddrop"
    assert method.k == 1.0 and method.leaks is None and method.marginalize
    assert method.schedule == Schedule()


def test_benchmark_spec_values():
    spec = parse_spec(EXPERIMENTS / "sines_benchmark.yaml")
    assert (spec.steps, spec.trials, spec.seed) == (10_000, 200, 2020)
    assert [m.name for m in spec.methods] == [
        "graddrop", "random_graddrop", "naive", "clipping", "pcgrad", "iterative_pcgrad", "mgda",
    ]
    for m in spec.methods:
        assert m.optimizer == "sgd" and not m.renormalize
        assert m.schedule.lr(10_000) == pytest.approx(1.953125e-4)
    clipping = spec.methods[3]
    assert clipping.kind == "naive" and clipping.clip_norm == 1.0


@pytest.mark.parametrize("path", sorted(EXPERIMENTS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_specs_parse(path):
    spec = parse_spec(path)
    assert spec.methods


def test_defaults_merge_under_methods():
    spec = parse_spec(EXPERIMENTS / "transfer_leak_sweep.yaml")
    leak_methods = [m for m in spec.methods if m.name.startswith("leak_")]
    assert len(leak_methods) == 5
    assert all(m.kind == "graddrop" and m.schedule.kind == "hold_decay" for m in leak_methods)
    assert leak_methods[0].leaks == (0.0, 1.0)
    naive = spec.methods[-1]
    assert naive.kind == "naive" and naive.schedule.hold == 1000


def test_nested_schedule_default_is_merged_per_key():
    spec = parse_spec_text(
        "problem: sines\n"
        "defaults:\n"
        "  schedule: {kind: constant, lr0: 0.1}\n"
        "methods:\n"
        "  - {name: a, kind: naive, schedule: {lr0: 0.3}}\n"
    )
    assert spec.methods[0].schedule == Schedule(kind="constant", lr0=0.3)


def test_scalar_leak_expands_to_every_task():
    spec = parse_spec_text("problem: sines\nmethods:\n  - {name: a, kind: graddrop, leaks: 0.5}\n")
    assert spec.methods[0].leaks == (0.5,) * 5


def _parse_error(text):
    with pytest.raises(SpecParseError) as exc:
        parse_spec_text(text, Path("bad.yaml"))
    return exc.value


def test_out_of_range_leak_names_its_line():
    e = _parse_error(
        "problem: quad_pair\n"
        "methods:\n"
        "  - name: a\n"
        "    kind: graddrop\n"
        "    leaks: [1.5, 0.0]\n"
    )
    assert e.line == 5
    assert "bad.yaml:5" in str(e)
    assert "leak" in str(e)


def test_wrong_leak_count():
    e = _parse_error("problem: quad_pair\nmethods:\n  - {name: a, kind: graddrop, leaks: [0.1, 0.2, 0.3]}\n")
    assert "2-task" in str(e)


def test_unknown_kind():
    e = _parse_error("problem: sines\nmethods:\n  - naive\n  - {name: b, kind: adagrad}\n")
    assert e.line == 4
    assert "adagrad" in str(e)


def test_bare_unknown_kind():
    e = _parse_error("problem: sines\nmethods:\n  - sgd_plus\n")
    assert "sgd_plus" in str(e)


def test_duplicate_method_names():
    e = _parse_error("problem: sines\nmethods:\n  - naive\n  - {name: naive, kind: graddrop}\n")
    assert "duplicate" in str(e) and e.line == 4


def test_method_names_colliding_in_file_names():
    e = _parse_error("problem: sines\nmethods:\n  - {name: a_b, kind: naive}\n  - {name: 'a b', kind: graddrop}\n")
    assert e.line == 4
    assert "a_b" in str(e) and "a b" in str(e)


def test_file_stem_keeps_safe_names():
    assert file_stem("gd-0.5_leak") == "gd-0.5_leak"
    assert file_stem("a b/c") == "a_b_c"


def test_missing_required_field():
    e = _parse_error("problem: sines\nsteps: 10\n")
    assert "methods" in str(e)


@pytest.mark.parametrize("text, needle", [
    ("problem: sines\nmethodz: [naive]\nmethods: [naive]\n", "methodz"),
    ("problem: sines\nsteps: 0\nmethods: [naive]\n", "steps"),
    ("problem: sines\ntrials: 2.5\nmethods: [naive]\n", "trials"),
    ("problem: sines\nseed: -1\nmethods: [naive]\n", "seed"),
    ("problem: sines\nmethods: []\n", "non-empty"),
    ("problem: {name: quad_pair, c: -1}\nmethods: [naive]\n", "Separation"),
    ("problem: sines\nmethods:\n  - {name: a, kind: naive, momentum: 0.9}\n", "momentum"),
    ("problem: sines\nmethods:\n  - {name: a, kind: naive, schedule: {kind: linear}}\n", "linear"),
    ("problem: sines\nmethods:\n  - {name: a, kind: graddrop, k: -2}\n", "k"),
    ("problem: [unclosed\n", "malformed"),
])
def test_rejected_specs(text, needle):
    assert needle in str(_parse_error(text))


def test_parse_errors_are_config_errors():
    with pytest.raises(ConfigError):
        parse_spec_text("problem: nope\nmethods: [naive]\n")


def test_missing_file(tmp_path):
    with pytest.raises(SpecParseError):
        parse_spec(tmp_path / "absent.yaml")


def test_resolved_spec_round_trips_through_json():
    for path in sorted(EXPERIMENTS.glob("*.yaml")):
        spec = parse_spec(path)
        assert parse_spec_text(json.dumps(spec.to_dict())) == spec


def test_with_trials():
    spec = parse_spec(EXPERIMENTS / "sines_minimal.yaml")
    assert spec.with_trials(3).trials == 3
    with pytest.raises(ConfigError):
        spec.with_trials(0)
