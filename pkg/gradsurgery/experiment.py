#!/usr/bin/env python3
"""
Experiment spec loading and normalization.

A spec is a YAML (or JSON) mapping:

    name: sines_benchmark
    problem: sines            # or {name: transfer, seed: 3, ...}
    steps: 10000
    trials: 200
    seed: 2020
    oracle_tol: 0.05
    defaults:                 # deep-merged under every method
      renormalize: false
      schedule: {kind: step, lr0: 0.2, decay_ratio: 0.5, decay_every: 1000}
    methods:
      - graddrop              # bare kind
      - name: clipping
        kind: naive
        clip_norm: 1.0

Errors name the file and the line of the offending key.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .config_loader import _deep_merge
from .errors import ConfigError, SpecParseError
from .optim import METHOD_KINDS, MethodSpec, Schedule
from .problems import Problem, build_problem

DEFAULT_STEPS = 10_000
DEFAULT_TRIALS = 200
DEFAULT_SEED = 0
DEFAULT_ORACLE_TOL = 0.05

TOP_LEVEL_KEYS = {"name", "problem", "steps", "trials", "seed", "oracle_tol", "output_dir", "defaults", "methods"}
METHOD_KEYS = {f.name for f in fields(MethodSpec)}
SCHEDULE_KEYS = {f.name for f in fields(Schedule)}
_FLOAT_METHOD_KEYS = ("k", "beta1", "beta2", "eps", "gradnorm_alpha", "gradnorm_lr")
_INT_SCHEDULE_KEYS = ("decay_every", "hold", "warmup", "total")


@dataclass(frozen=True)
class ExperimentSpec:
    """A fully-defaulted experiment: one problem, several methods, many trials."""
    name: str
    problem: str
    problem_params: dict[str, Any]
    methods: tuple[MethodSpec, ...]
    steps: int = DEFAULT_STEPS
    trials: int = DEFAULT_TRIALS
    seed: int = DEFAULT_SEED
    oracle_tol: float = DEFAULT_ORACLE_TOL
    output_dir: Optional[str] = None

    def build_problem(self) -> Problem:
        return build_problem(self.problem, **self.problem_params)

    def with_trials(self, trials: int) -> "ExperimentSpec":
        if trials < 1:
            raise ConfigError(f"trials must be >= 1, got {trials}")
        return replace(self, trials=trials)

    def to_dict(self) -> dict[str, Any]:
        """Resolved form; parsing it back yields an equal spec."""
        return {
            "name": self.name,
            "problem": {"name": self.problem, **self.problem_params},
            "steps": self.steps,
            "trials": self.trials,
            "seed": self.seed,
            "oracle_tol": self.oracle_tol,
            "output_dir": self.output_dir,
            "methods": [m.to_dict() for m in self.methods],
        }


class _Lines:
    """1-based source lines for key paths in a composed YAML document."""

    def __init__(self, node: Optional[yaml.Node]):
        self.root = node

    def of(self, *path: Any) -> Optional[int]:
        node = self.root
        line = node.start_mark.line + 1 if node is not None else None
        for step in path:
            if isinstance(node, yaml.MappingNode):
                for key_node, value_node in node.value:
                    if key_node.value == step:
                        line = key_node.start_mark.line + 1
                        node = value_node
                        break
                else:
                    return line
            elif isinstance(node, yaml.SequenceNode) and isinstance(step, int) and step < len(node.value):
                node = node.value[step]
                line = node.start_mark.line + 1
            else:
                return line
        return line


def file_stem(name: str) -> str:
    """A method name as it appears in per-method file names."""
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def _int(value: Any, what: str, err) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
        raise err(f"{what} must be an integer, got {value!r}")
    return int(value)


def _float(value: Any, what: str, err) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise err(f"{what} must be a number, got {value!r}")
    return float(value)


def _parse_problem(raw: Any, err) -> tuple[str, dict[str, Any]]:
    if isinstance(raw, str):
        return raw, {}
    if isinstance(raw, dict):
        params = dict(raw)
        name = params.pop("name", None)
        if not isinstance(name, str):
            raise err("problem mapping needs a 'name'", "problem")
        return name, params
    raise err(f"problem must be a name or a mapping, got {raw!r}", "problem")


def _method_entry(raw: Any, i: int, defaults: dict[str, Any], err) -> dict[str, Any]:
    """Method mapping with the spec's defaults merged underneath."""
    if isinstance(raw, str):
        return _deep_merge(defaults, {"name": raw, "kind": raw})
    if not isinstance(raw, dict):
        raise err(f"method #{i + 1} must be a kind name or a mapping", "methods", i)
    entry = _deep_merge(defaults, raw)
    if "kind" not in entry:
        if entry.get("name") in METHOD_KINDS:
            entry["kind"] = entry["name"]
        else:
            raise err(f"method #{i + 1} is missing 'kind'", "methods", i)
    entry.setdefault("name", entry["kind"])
    return entry


def _build_method(entry: dict[str, Any], i: int, n_tasks: int, err) -> MethodSpec:
    where = ("methods", i)
    unknown = sorted(set(entry) - METHOD_KEYS)
    if unknown:
        raise err(f"method '{entry['name']}' has unknown field(s): {', '.join(unknown)}", *where, unknown[0])
    if entry["kind"] not in METHOD_KINDS:
        raise err(
            f"unknown method kind '{entry['kind']}' (known: {', '.join(METHOD_KINDS)})", *where, "kind"
        )

    values = dict(entry)
    values["name"] = str(values["name"])
    for key in _FLOAT_METHOD_KEYS:
        if key in values:
            values[key] = _float(values[key], f"{key} of method '{values['name']}'",
                                 lambda m, key=key: err(m, *where, key))
    k = values.get("k", 1.0)
    if not math.isfinite(k) or k < 0:
        raise err(f"k must be a finite value >= 0, got {k}", *where, "k")

    leaks = values.get("leaks")
    if leaks is not None:
        if isinstance(leaks, (int, float)) and not isinstance(leaks, bool):
            leaks = [leaks] * n_tasks
        if not isinstance(leaks, list):
            raise err(f"leaks must be a number or a list, got {leaks!r}", *where, "leaks")
        leaks = tuple(_float(x, "leak", lambda m: err(m, *where, "leaks")) for x in leaks)
        for leak in leaks:
            if not 0.0 <= leak <= 1.0:
                raise err(f"leak values must lie in [0, 1], got {leak}", *where, "leaks")
        if len(leaks) != n_tasks:
            raise err(f"got {len(leaks)} leak values for a {n_tasks}-task problem", *where, "leaks")
        values["leaks"] = leaks

    clip = values.get("clip_norm")
    if clip is not None:
        values["clip_norm"] = _float(clip, "clip_norm", lambda m: err(m, *where, "clip_norm"))

    sched = values.get("schedule", {})
    if not isinstance(sched, dict):
        raise err("schedule must be a mapping", *where, "schedule")
    unknown = sorted(set(sched) - SCHEDULE_KEYS)
    if unknown:
        raise err(f"schedule has unknown field(s): {', '.join(unknown)}", *where, "schedule", unknown[0])
    sched = dict(sched)
    for key, value in sched.items():
        if key == "kind":
            continue
        fail = lambda m, key=key: err(m, *where, "schedule", key)
        sched[key] = _int(value, key, fail) if key in _INT_SCHEDULE_KEYS else _float(value, key, fail)
    try:
        values["schedule"] = Schedule(**sched)
        return MethodSpec(**values)
    except ConfigError as e:
        raise err(str(e), *where) from e


def parse_spec_text(text: str, path: Optional[Path] = None) -> ExperimentSpec:
    """Parse spec text; `path` is only used in error messages."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise SpecParseError(f"malformed YAML: {e}", path, mark.line + 1 if mark else None) from e

    lines = _Lines(node)

    def err(message: str, *key_path: Any) -> SpecParseError:
        return SpecParseError(message, path, lines.of(*key_path))

    if not isinstance(data, dict):
        raise err("spec must be a YAML mapping/object")
    unknown = sorted(set(data) - TOP_LEVEL_KEYS)
    if unknown:
        raise err(f"unknown top-level field(s): {', '.join(unknown)}", unknown[0])
    for required in ("problem", "methods"):
        if required not in data:
            raise err(f"missing required field '{required}'")

    problem_name, params = _parse_problem(data["problem"], err)
    try:
        problem = build_problem(problem_name, **dict(params))
    except ConfigError as e:
        raise err(str(e), "problem") from e

    steps = _int(data.get("steps", DEFAULT_STEPS), "steps", lambda m: err(m, "steps"))
    if steps < 1:
        raise err(f"steps must be >= 1, got {steps}", "steps")
    trials = _int(data.get("trials", DEFAULT_TRIALS), "trials", lambda m: err(m, "trials"))
    if trials < 1:
        raise err(f"trials must be >= 1, got {trials}", "trials")
    seed = _int(data.get("seed", DEFAULT_SEED), "seed", lambda m: err(m, "seed"))
    if seed < 0:
        raise err(f"seed must be >= 0, got {seed}", "seed")
    tol = _float(data.get("oracle_tol", DEFAULT_ORACLE_TOL), "oracle_tol", lambda m: err(m, "oracle_tol"))
    if not tol > 0:
        raise err(f"oracle_tol must be > 0, got {tol}", "oracle_tol")

    defaults = data.get("defaults") or {}
    if not isinstance(defaults, dict):
        raise err("defaults must be a mapping", "defaults")
    raw_methods = data["methods"]
    if not isinstance(raw_methods, list) or not raw_methods:
        raise err("methods must be a non-empty list", "methods")

    methods: list[MethodSpec] = []
    seen: set[str] = set()
    stems: dict[str, str] = {}
    for i, raw in enumerate(raw_methods):
        entry = _method_entry(raw, i, defaults, err)
        method = _build_method(entry, i, problem.n_tasks, err)
        if method.name in seen:
            raise err(f"duplicate method name '{method.name}'", "methods", i)
        stem = file_stem(method.name)
        if stem in stems:
            raise err(
                f"method names '{stems[stem]}' and '{method.name}' share the file name '{stem}'",
                "methods", i,
            )
        seen.add(method.name)
        stems[stem] = method.name
        methods.append(method)

    output_dir = data.get("output_dir")
    name = data.get("name") or (path.stem if path is not None else "experiment")
    return ExperimentSpec(
        name=str(name),
        problem=problem_name,
        problem_params=params,
        methods=tuple(methods),
        steps=steps,
        trials=trials,
        seed=seed,
        oracle_tol=tol,
        output_dir=str(output_dir) if output_dir is not None else None,
    )


def parse_spec(path: Path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise SpecParseError(f"cannot read spec: {e.strerror or e}", path) from e
    return parse_spec_text(text, path)
