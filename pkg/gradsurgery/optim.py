"""
First-order optimizers, learning-rate schedules and the training loop.

`train` wires a Problem to one combiner method. Each trial owns three
independent random streams derived from its seeds:

    INIT_STREAM       initial weights (keyed by the init seed, shared across methods)
    COMBINER_STREAM   the method's own randomness (GradDrop draws, PCGrad orders)
    PROBE_STREAM      masks sampled only to report a keep fraction
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .combine import (
    CombinerConfig,
    GradNormState,
    TaskGradients,
    clip_global_norm,
    graddrop,
    graddrop_rows,
    gradnorm_step_rows,
    hypothetical_keep_fraction,
    mgda_minnorm,
    mgda_rows,
    naive_sum,
    pcgrad,
    pcgrad_rows,
)
from .errors import ConfigError, GradSurgeryError, PreconditionError, ShapeError
from .ndcore import RngStream, Tensor, l2_norm
from .problems import OneDimProblem, Problem

logger = logging.getLogger(__name__)

INIT_STREAM = 0
COMBINER_STREAM = 1
PROBE_STREAM = 2

SCHEDULE_KINDS = ("constant", "step", "hold_decay", "warmup_cosine")
OPTIMIZERS = ("sgd", "adam")
METHOD_KINDS = (
    "naive",
    "graddrop",
    "random_graddrop",
    "pcgrad",
    "iterative_pcgrad",
    "mgda",
    "gradnorm",
    "gradnorm_graddrop",
    "gradnorm_random_graddrop",
)
GRADDROP_KINDS = ("graddrop", "random_graddrop", "gradnorm_graddrop", "gradnorm_random_graddrop")
GRADNORM_KINDS = ("gradnorm", "gradnorm_graddrop", "gradnorm_random_graddrop")


@dataclass(frozen=True)
class Schedule:
    """
    Learning rate as a function of the step counter.

    constant        lr0
    step            lr0 * decay_ratio ** (step // decay_every)
    hold_decay      lr0 until `hold`, then one decay at `hold` and every `decay_every` after
    warmup_cosine   linear ramp over `warmup` steps, then cosine annealing to `min_lr` at `total`
    """
    kind: str = "step"
    lr0: float = 0.2
    decay_ratio: float = 0.5
    decay_every: int = 1000
    hold: int = 0
    warmup: int = 0
    total: int = 0
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"Unknown schedule kind '{self.kind}' (known: {', '.join(SCHEDULE_KINDS)})")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if self.kind in ("step", "hold_decay"):
            if not 0 < self.decay_ratio <= 1:
                raise ConfigError(f"decay_ratio must lie in (0, 1], got {self.decay_ratio}")
            if self.decay_every < 1:
                raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.kind == "hold_decay" and self.hold < 0:
            raise ConfigError(f"hold must be >= 0, got {self.hold}")
        if self.kind == "warmup_cosine":
            if not 0 < self.min_lr <= self.lr0:
                raise ConfigError(f"min_lr must lie in (0, lr0], got {self.min_lr}")
            if self.warmup < 0 or self.total <= self.warmup:
                raise ConfigError(f"warmup_cosine needs 0 <= warmup < total, got warmup={self.warmup} total={self.total}")

    def lr(self, step: int) -> float:
        if self.kind == "constant":
            return self.lr0
        if self.kind == "step":
            return self.lr0 * self.decay_ratio ** (step // self.decay_every)
        if self.kind == "hold_decay":
            if step < self.hold:
                return self.lr0
            return self.lr0 * self.decay_ratio ** ((step - self.hold) // self.decay_every + 1)
        if step < self.warmup:
            return self.lr0 * (step + 1) / self.warmup
        progress = min((step - self.warmup) / (self.total - self.warmup), 1.0)
        return self.min_lr + (self.lr0 - self.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class OptimState:
    """Weights, step counter and (for Adam) the moment estimates."""
    w: Tensor
    step: int = 0
    m: Optional[Tensor] = None
    v: Optional[Tensor] = None

    def __post_init__(self):
        for name in ("m", "v"):
            moment = getattr(self, name)
            if moment is not None and moment.shape != self.w.shape:
                raise ShapeError(f"Moment '{name}' has shape {moment.shape}, weights have {self.w.shape}")


def _check_congruent(state: OptimState, g: Tensor) -> None:
    if g.shape != state.w.shape:
        raise ShapeError(f"Gradient shape {g.shape} does not match weight shape {state.w.shape}")


def sgd_step(state: OptimState, g: Tensor, schedule: Schedule) -> OptimState:
    _check_congruent(state, g)
    lr = schedule.lr(state.step)
    return replace(state, w=Tensor.wrap(state.w.array - lr * g.array), step=state.step + 1)


def adam_step(state: OptimState, g: Tensor, schedule: Schedule,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimState:
    """Bias-corrected adaptive moment update."""
    _check_congruent(state, g)
    m = state.m.array if state.m is not None else np.zeros(state.w.shape)
    v = state.v.array if state.v is not None else np.zeros(state.w.shape)
    ga = g.array
    t = state.step + 1
    m = beta1 * m + (1.0 - beta1) * ga
    v = beta2 * v + (1.0 - beta2) * ga * ga
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    lr = schedule.lr(state.step)
    w = state.w.array - lr * m_hat / (np.sqrt(v_hat) + eps)
    return OptimState(w=Tensor.wrap(w), step=t, m=Tensor.wrap(m), v=Tensor.wrap(v))


@dataclass(frozen=True)
class MethodSpec:
    """One combiner method with its optimizer and schedule."""
    name: str
    kind: str = "graddrop"
    k: float = 1.0
    leaks: Optional[tuple[float, ...]] = None
    marginalize: bool = True
    renormalize: bool = True
    clip_norm: Optional[float] = None
    optimizer: str = "sgd"
    schedule: Schedule = field(default_factory=Schedule)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gradnorm_alpha: float = 1.0
    gradnorm_lr: float = 0.025

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"Unknown method kind '{self.kind}' (known: {', '.join(METHOD_KINDS)})")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Unknown optimizer '{self.optimizer}' (known: {', '.join(OPTIMIZERS)})")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.leaks is not None:
            object.__setattr__(self, "leaks", tuple(float(x) for x in self.leaks))
        # validates k and leaks
        self.combiner_config()

    @property
    def effective_k(self) -> float:
        return 0.0 if self.kind.endswith("random_graddrop") else self.k

    def combiner_config(self, rng: Optional[RngStream] = None) -> CombinerConfig:
        return CombinerConfig(
            k=self.effective_k,
            leaks=self.leaks,
            marginalize=self.marginalize,
            renormalize=self.renormalize,
            rng=rng,
        )

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["leaks"] = list(self.leaks) if self.leaks is not None else None
        return out

    def fingerprint(self) -> int:
        """64-bit hash of everything but the name, so renamed copies share randomness."""
        body = self.to_dict()
        body.pop("name")
        digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class TrialRecord:
    """One optimization run."""
    seed: int
    method: str
    fingerprint: int
    trajectory: tuple[float, ...]
    final_task_losses: tuple[float, ...]
    final_w: tuple[float, ...]
    keep_trace: tuple[tuple[int, float], ...]
    wall_ms: float
    diverged: bool = False
    note: str = ""
    final_task_grad_norms: tuple[float, ...] = ()
    holdout_losses: Optional[tuple[float, ...]] = None
    init_seed: Optional[int] = None

    @property
    def final_loss(self) -> float:
        return float("nan") if self.diverged else self.trajectory[-1]

    @property
    def steps(self) -> int:
        return len(self.trajectory) - 1

    def keep_at(self, step: int) -> Optional[float]:
        for s, value in self.keep_trace:
            if s == step:
                return value
        return None


def _combine(method: MethodSpec, tg: TaskGradients, rng: RngStream) -> tuple[Tensor, Optional[float]]:
    """Combined gradient, plus the keep fraction when the method masks."""
    kind = method.kind
    if kind in GRADDROP_KINDS:
        out, masks = graddrop(tg, method.combiner_config(rng))
        return out, masks.keep_fraction
    if kind in ("naive", "gradnorm"):
        return naive_sum(tg), None
    if kind in ("pcgrad", "iterative_pcgrad"):
        return pcgrad(tg, rng, iterative=kind == "iterative_pcgrad"), None
    _, out = mgda_minnorm(tg)
    return out, None


def _task_gradients(problem: Problem, w: Tensor) -> tuple[TaskGradients, Callable[[Tensor], Tensor]]:
    shared = problem.layer_grads(w)
    if shared is None:
        return problem.grad(w), lambda g: g
    return shared.tasks, shared.assemble


def _finite(values) -> bool:
    return all(math.isfinite(v) for v in values)


def train(
    problem: Problem,
    method: MethodSpec,
    steps: int,
    seed: int,
    init_seed: Optional[int] = None,
    keep_every: int = 10,
    record_timing: bool = True,
) -> TrialRecord:
    """
    Run one trial: grad, combine, clip, optimizer step, repeated `steps` times.

    The sum loss is recorded before the first step and after every step. The
    keep fraction is recorded at every step divisible by `keep_every`. For
    methods that do not mask, it is the fraction GradDrop would have kept,
    sampled on PROBE_STREAM. Non-finite values and library errors end the
    trial with `diverged=True` rather than raising.
    One-dimensional problems run through `train_scalar_batch` as a batch of one.
    """
    if steps < 1:
        raise PreconditionError(f"steps must be >= 1, got {steps}")
    if keep_every < 1:
        raise PreconditionError(f"keep_every must be >= 1, got {keep_every}")

    init_seed = seed if init_seed is None else init_seed
    if isinstance(problem, OneDimProblem):
        return train_scalar_batch(problem, method, steps, [seed], [init_seed], keep_every, record_timing)[0]
    combiner_rng = RngStream(seed, COMBINER_STREAM)
    probe_rng = RngStream(seed, PROBE_STREAM)
    state = OptimState(w=problem.init_weights(RngStream(init_seed, INIT_STREAM)))
    gradnorm = (
        GradNormState.start(problem.n_tasks, method.gradnorm_alpha, method.gradnorm_lr)
        if method.kind in GRADNORM_KINDS else None
    )

    losses = problem.eval(state.w)
    trajectory = [float(sum(losses))]
    keep_trace: list[tuple[int, float]] = []
    diverged = not _finite(losses)
    note = "non-finite initial loss" if diverged else ""

    started = time.perf_counter()
    step = 0
    while not diverged and step < steps:
        try:
            tg, assemble = _task_gradients(problem, state.w)
            if gradnorm is not None:
                norms = [l2_norm(g) for g in tg.grads]
                weighted = tg.scaled(gradnorm.weights)
                gradnorm = gradnorm.update(losses, norms)
            else:
                weighted = tg
            combined, keep = _combine(method, weighted, combiner_rng)
            if step % keep_every == 0:
                if keep is None:
                    keep = hypothetical_keep_fraction(tg, probe_rng, marginalize=method.marginalize)
                keep_trace.append((step, keep))
            g = assemble(combined)
            if method.clip_norm is not None:
                g = clip_global_norm(g, method.clip_norm)
            if not g.is_finite():
                diverged, note = True, f"non-finite gradient at step {step}"
                break
            if method.optimizer == "adam":
                state = adam_step(state, g, method.schedule, method.beta1, method.beta2, method.eps)
            else:
                state = sgd_step(state, g, method.schedule)
            losses = problem.eval(state.w)
        except GradSurgeryError as e:
            diverged, note = True, f"step {step}: {e}"
            break
        if not _finite(losses):
            diverged, note = True, f"non-finite loss at step {step + 1}"
            break
        trajectory.append(float(sum(losses)))
        step += 1
    wall_ms = (time.perf_counter() - started) * 1000.0 if record_timing else 0.0

    if diverged:
        logger.warning("Trial diverged (method=%s seed=%d): %s", method.name, seed, note)
        return TrialRecord(
            seed=seed, method=method.name, fingerprint=method.fingerprint(),
            trajectory=tuple(trajectory), final_task_losses=tuple(float(x) for x in losses),
            final_w=tuple(state.w.data.tolist()), keep_trace=tuple(keep_trace),
            wall_ms=wall_ms, diverged=True, note=note, init_seed=init_seed,
        )

    final_norms = tuple(l2_norm(g) for g in problem.grad(state.w).grads)
    holdout = problem.holdout_losses(state.w)
    logger.debug("Trial done (method=%s seed=%d): final loss %.6g", method.name, seed, trajectory[-1])
    return TrialRecord(
        seed=seed,
        method=method.name,
        fingerprint=method.fingerprint(),
        trajectory=tuple(trajectory),
        final_task_losses=tuple(float(x) for x in losses),
        final_w=tuple(state.w.data.tolist()),
        keep_trace=tuple(keep_trace),
        wall_ms=wall_ms,
        final_task_grad_norms=final_norms,
        holdout_losses=tuple(holdout) if holdout is not None else None,
        init_seed=init_seed,
    )


ROW_DRAW_CHUNK = 1024


class _RowDraws:
    """Uniform draws for many trials; trial t's column comes from its own stream only."""

    def __init__(self, streams: list[RngStream], width: int, chunk: int = ROW_DRAW_CHUNK):
        self._streams = streams
        self._width = width
        self._chunk = chunk
        self._buffer = np.empty((len(streams), 0, width))
        self._pos = 0

    def next(self) -> np.ndarray:
        """(n_trials, width) fresh draws."""
        if self._pos == self._buffer.shape[1]:
            self._buffer = np.stack([s.random((self._chunk, self._width)) for s in self._streams])
            self._pos = 0
        out = self._buffer[:, self._pos, :]
        self._pos += 1
        return out


def _sum_rows(values: np.ndarray) -> np.ndarray:
    total = values[0].copy()
    for row in values[1:]:
        total += row
    return total


def train_scalar_batch(
    problem: OneDimProblem,
    method: MethodSpec,
    steps: int,
    seeds: Sequence[int],
    init_seeds: Optional[Sequence[int]] = None,
    keep_every: int = 10,
    record_timing: bool = True,
) -> list[TrialRecord]:
    """
    `train` for many trials of one method on a one-dimensional problem at once.

    Trial t is column t of every array and draws only from the streams its
    own seeds name, so its record does not depend on the other trials. The
    batch wall time is split evenly across trials.
    """
    if steps < 1:
        raise PreconditionError(f"steps must be >= 1, got {steps}")
    if keep_every < 1:
        raise PreconditionError(f"keep_every must be >= 1, got {keep_every}")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise PreconditionError("train_scalar_batch needs at least one seed")
    init_seeds = list(seeds) if init_seeds is None else [int(s) for s in init_seeds]
    if len(init_seeds) != len(seeds):
        raise PreconditionError(f"Got {len(init_seeds)} init seeds for {len(seeds)} seeds")

    n_trials = len(seeds)
    n_tasks = problem.n_tasks
    kind = method.kind
    x = np.array([problem.init_weights(RngStream(s, INIT_STREAM)).item() for s in init_seeds])
    losses = problem.losses_at(x)

    trajectory = np.full((steps + 1, n_trials), np.nan)
    trajectory[0] = _sum_rows(losses)
    keep_steps = list(range(0, steps, keep_every))
    keep = np.full((len(keep_steps), n_trials), np.nan)

    # a trial that stops early keeps its state from the moment it stopped
    live = np.all(np.isfinite(losses), axis=0)
    notes = ["" if ok else "non-finite initial loss" for ok in live]
    ended_at = np.where(live, steps, 0)
    keep_until = ended_at.copy()
    final_x = x.copy()
    final_losses = losses.copy()

    def stop(bad: np.ndarray, step: int, note: str, kept: bool, at_x: np.ndarray, at_losses: np.ndarray) -> None:
        for t in np.flatnonzero(bad):
            notes[t] = note
            ended_at[t] = step
            keep_until[t] = step + 1 if kept else step
            final_x[t] = at_x[t]
            final_losses[:, t] = at_losses[:, t]
        live[bad] = False

    cfg = method.combiner_config()
    if kind in GRADDROP_KINDS:
        try:
            cfg.leaks_for(n_tasks)
        except GradSurgeryError as e:
            stop(live.copy(), 0, f"step 0: {e}", False, x, losses)

    combiner_streams = [RngStream(s, COMBINER_STREAM) for s in seeds]
    probe = _RowDraws([RngStream(s, PROBE_STREAM) for s in seeds], 1)
    if kind in GRADDROP_KINDS:
        draws = _RowDraws(combiner_streams, 1)
    elif kind in ("pcgrad", "iterative_pcgrad"):
        draws = _RowDraws(combiner_streams, (n_tasks + 1) * n_tasks)
    else:
        draws = None
    unit = CombinerConfig(k=1.0)
    weights = np.ones((n_tasks, n_trials)) if kind in GRADNORM_KINDS else None
    initial_losses = None
    m = np.zeros(n_trials)
    v = np.zeros(n_trials)

    started = time.perf_counter()
    with np.errstate(all="ignore"):
        for step in range(steps):
            if not live.any():
                break
            grads = problem.grads_at(x)
            weighted = grads
            if weights is not None:
                if initial_losses is None:
                    initial_losses = losses.copy()
                    bad = live & ~np.all(initial_losses > 0, axis=0)
                    for t in np.flatnonzero(bad):
                        i = int(np.flatnonzero(~(initial_losses[:, t] > 0))[0])
                        stop(np.arange(n_trials) == t, step,
                             f"step {step}: Initial loss for task {i + 1} must be > 0, got {initial_losses[i, t]}",
                             False, x, losses)
                weighted = grads * weights
                weights = gradnorm_step_rows(weights, losses, np.abs(grads), initial_losses,
                                             method.gradnorm_alpha, method.gradnorm_lr)

            kept = None
            if kind in GRADDROP_KINDS:
                g, kept = graddrop_rows(weighted, cfg, draws.next()[:, 0])
            elif kind in ("pcgrad", "iterative_pcgrad"):
                orders = np.argsort(draws.next().reshape(n_trials, n_tasks + 1, n_tasks), axis=2)
                g = pcgrad_rows(weighted, orders, iterative=kind == "iterative_pcgrad")
            elif kind == "mgda":
                g = mgda_rows(weighted)
            else:
                g = _sum_rows(weighted)
            if step % keep_every == 0:
                if kept is None:
                    _, kept = graddrop_rows(grads, unit, probe.next()[:, 0])
                keep[step // keep_every] = kept

            if method.clip_norm is not None:
                size = np.abs(g)
                g = np.where(size > method.clip_norm, g * (method.clip_norm / size), g)
            bad = live & ~np.isfinite(g)
            stop(bad, step, f"non-finite gradient at step {step}", True, x, losses)

            lr = method.schedule.lr(step)
            if method.optimizer == "adam":
                t = step + 1
                m = method.beta1 * m + (1.0 - method.beta1) * g
                v = method.beta2 * v + (1.0 - method.beta2) * g * g
                m_hat = m / (1.0 - method.beta1 ** t)
                v_hat = v / (1.0 - method.beta2 ** t)
                x = x - lr * m_hat / (np.sqrt(v_hat) + method.eps)
            else:
                x = x - lr * g
            losses = problem.losses_at(x)
            bad = live & ~np.all(np.isfinite(losses), axis=0)
            stop(bad, step, f"non-finite loss at step {step + 1}", True, x, losses)
            trajectory[step + 1] = _sum_rows(losses)
    wall_ms = (time.perf_counter() - started) * 1000.0 / n_trials if record_timing else 0.0

    final_x[live] = x[live]
    final_losses[:, live] = losses[:, live]
    fingerprint = method.fingerprint()
    records = []
    for t in range(n_trials):
        trace = tuple(
            (s, float(keep[row, t])) for row, s in enumerate(keep_steps) if s < keep_until[t]
        )
        common = dict(
            seed=seeds[t], method=method.name, fingerprint=fingerprint,
            trajectory=tuple(float(y) for y in trajectory[:ended_at[t] + 1, t]),
            final_task_losses=tuple(float(y) for y in final_losses[:, t]),
            final_w=(float(final_x[t]),), keep_trace=trace, wall_ms=wall_ms, init_seed=init_seeds[t],
        )
        if not live[t]:
            logger.warning("Trial diverged (method=%s seed=%d): %s", method.name, seeds[t], notes[t])
            records.append(TrialRecord(diverged=True, note=notes[t], **common))
            continue
        w = Tensor([final_x[t]])
        holdout = problem.holdout_losses(w)
        records.append(TrialRecord(
            final_task_grad_norms=tuple(float(y) for y in np.abs(problem.grads_at(final_x[t:t + 1])[:, 0])),
            holdout_losses=tuple(holdout) if holdout is not None else None,
            **common,
        ))
    logger.debug("Batch done (method=%s, %d trials, %d steps)", method.name, n_trials, steps)
    return records
