"""
Analytic multi-loss objectives with exact gradients.

Two families:

  * one-dimensional problems (`SinesProblem`, `QuadPairProblem`) where every
    task loss is a closed-form function of a single weight, and
  * shared-trunk problems (`SharedTrunkProblem`): a one-hidden-layer tanh
    network with one scalar regression head per task, trained on a frozen
    synthetic dataset. Gradients are hand-derived backpropagation.

Shared-trunk problems also expose `layer_grads`, the per-task gradients at the
last shared activation together with the closure that backpropagates a
combined activation gradient into the trunk. Combiners act there.

Also here: the finite-difference gradient oracle and the grid-search
global-minimum oracle for one-dimensional problems.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .combine import TaskGradients
from .errors import ConfigError, PreconditionError
from .ndcore import RngStream, Tensor

logger = logging.getLogger(__name__)

CANONICAL_SINES: tuple[tuple[float, float], ...] = (
    (1.0, 0.0),
    (1.5, 0.2),
    (2.0, 0.4),
    (2.5, 0.6),
    (5.0, 0.8),
)
TOY_INIT_RANGE = (-10.0, 10.0)
DATA_STREAM = 0x5EED


@dataclass(frozen=True)
class SineParams:
    """(frequency, phase) per task."""
    pairs: tuple[tuple[float, float], ...] = CANONICAL_SINES


@dataclass(frozen=True)
class SharedLayerGradients:
    """Per-task gradients at the last shared activation, plus how to finish the backward pass."""
    tasks: TaskGradients
    head_grad: Tensor
    backprop: Callable[[Tensor], Tensor]

    def assemble(self, combined: Tensor) -> Tensor:
        """Full weight gradient for a combined activation gradient."""
        return self.head_grad + self.backprop(combined)


class Problem(ABC):
    """A multi-loss differentiable objective over a flat weight vector."""

    name: str = "problem"
    dim: int = 0
    n_tasks: int = 0
    batch_separated: bool = False

    @abstractmethod
    def eval(self, w: Tensor) -> list[float]:
        """Per-task loss values at w."""

    @abstractmethod
    def grad(self, w: Tensor) -> TaskGradients:
        """Per-task gradients with respect to w."""

    @abstractmethod
    def init_weights(self, rng: RngStream) -> Tensor:
        ...

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(f"task{i + 1}" for i in range(self.n_tasks))

    def layer_grads(self, w: Tensor) -> Optional[SharedLayerGradients]:
        """Gradients at the last shared layer; None when combiners act on w directly."""
        return None

    def holdout_losses(self, w: Tensor) -> Optional[list[float]]:
        return None

    def sum_loss(self, w: Tensor) -> float:
        return float(sum(self.eval(w)))

    def describe(self) -> dict[str, Any]:
        return {"name": self.name}


class OneDimProblem(Problem):
    """Tasks that are closed-form functions of one scalar weight."""

    dim = 1

    @abstractmethod
    def losses_at(self, xs: np.ndarray) -> np.ndarray:
        """Task losses at each x, shape (n_tasks, len(xs))."""

    @abstractmethod
    def grads_at(self, xs: np.ndarray) -> np.ndarray:
        """Task derivatives at each x, shape (n_tasks, len(xs))."""

    def _scalar(self, w: Tensor) -> np.ndarray:
        flat = w.array.reshape(-1)
        if flat.size != 1:
            raise ConfigError(f"{self.name} expects 1 weight, got {flat.size}")
        return flat

    def eval(self, w: Tensor) -> list[float]:
        return self.losses_at(self._scalar(w))[:, 0].tolist()

    def grad(self, w: Tensor) -> TaskGradients:
        g = self.grads_at(self._scalar(w))
        return TaskGradients(grads=tuple(Tensor.wrap(row) for row in g))

    def init_weights(self, rng: RngStream) -> Tensor:
        lo, hi = TOY_INIT_RANGE
        return Tensor.wrap(rng.uniform_range(lo, hi, (1,)))


class SinesProblem(OneDimProblem):
    """L_i(x) = sin(a_i x + b_i) + 1."""

    def __init__(self, params: SineParams = SineParams()):
        if not params.pairs:
            raise ConfigError("SineParams needs at least one (a, b) pair")
        self.params = params
        self.name = "sines"
        self.n_tasks = len(params.pairs)
        self._a = np.array([a for a, _ in params.pairs], dtype=np.float64)[:, None]
        self._b = np.array([b for _, b in params.pairs], dtype=np.float64)[:, None]

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(f"sine{i + 1}" for i in range(self.n_tasks))

    def losses_at(self, xs: np.ndarray) -> np.ndarray:
        return np.sin(self._a * xs[None, :] + self._b) + 1.0

    def grads_at(self, xs: np.ndarray) -> np.ndarray:
        return self._a * np.cos(self._a * xs[None, :] + self._b)

    def describe(self) -> dict[str, Any]:
        return {"name": self.name, "pairs": [list(p) for p in self.params.pairs]}


class QuadPairProblem(OneDimProblem):
    """L_1 = (x - c)^2, L_2 = (x + c)^2. The sum's minimum at 0 is a joint minimum only when c = 0."""

    def __init__(self, c: float = 1.0):
        if not c >= 0:
            raise ConfigError(f"Separation c must be >= 0, got {c}")
        self.c = float(c)
        self.name = "quad_pair"
        self.n_tasks = 2
        self._centers = np.array([[self.c], [-self.c]])

    def losses_at(self, xs: np.ndarray) -> np.ndarray:
        return (xs[None, :] - self._centers) ** 2

    def grads_at(self, xs: np.ndarray) -> np.ndarray:
        return 2.0 * (xs[None, :] - self._centers)

    def describe(self) -> dict[str, Any]:
        return {"name": self.name, "c": self.c}


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


class SharedTrunkProblem(Problem):
    """
    One tanh hidden layer shared by every task, one linear scalar head per task.

    Task t's loss is the mean squared error over the batch rows in its row
    mask. Weights are laid out flat as [W1 (n_in x H), b1 (H), W2 (T x H), b2 (T)].
    """

    def __init__(
        self,
        inputs: np.ndarray,
        targets: np.ndarray,
        hidden: int,
        row_masks: Optional[np.ndarray] = None,
        name: str = "mlp",
        batch_separated: bool = False,
        holdout: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
        task_names: Optional[Sequence[str]] = None,
        describe: Optional[dict[str, Any]] = None,
    ):
        if hidden < 1:
            raise ConfigError(f"hidden must be >= 1, got {hidden}")
        X = _frozen(inputs)
        Y = _frozen(targets)
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ConfigError(f"inputs (B, n_in) and targets (B, T) disagree: {X.shape} vs {Y.shape}")
        n_tasks = Y.shape[1]
        if n_tasks < 1:
            raise ConfigError("At least one task head is required")
        if row_masks is None:
            row_masks = np.ones((n_tasks, X.shape[0]), dtype=bool)
        masks = np.array(row_masks, dtype=bool)
        if masks.shape != (n_tasks, X.shape[0]) or not masks.any(axis=1).all():
            raise ConfigError("Every task needs a non-empty row mask of length B")
        masks.setflags(write=False)

        self.name = name
        self.batch_separated = batch_separated
        self.inputs = X
        self.targets = Y
        self.row_masks = masks
        self.hidden = int(hidden)
        self.n_inputs = X.shape[1]
        self.n_tasks = n_tasks
        self.dim = self.n_inputs * self.hidden + self.hidden + n_tasks * self.hidden + n_tasks
        self._holdout = holdout
        self._task_names = tuple(task_names) if task_names else None
        self._describe = describe or {"name": name}
        self._counts = masks.sum(axis=1).astype(np.float64)

    @property
    def task_names(self) -> tuple[str, ...]:
        return self._task_names or super().task_names

    def describe(self) -> dict[str, Any]:
        return dict(self._describe)

    def _unpack(self, w: Tensor):
        flat = w.array.reshape(-1)
        if flat.size != self.dim:
            raise ConfigError(f"{self.name} expects {self.dim} weights, got {flat.size}")
        n_in, h, t = self.n_inputs, self.hidden, self.n_tasks
        i = 0
        W1 = flat[i:i + n_in * h].reshape(n_in, h); i += n_in * h
        b1 = flat[i:i + h]; i += h
        W2 = flat[i:i + t * h].reshape(t, h); i += t * h
        b2 = flat[i:i + t]
        return W1, b1, W2, b2

    def _forward(self, w: Tensor, X: np.ndarray):
        W1, b1, W2, b2 = self._unpack(w)
        A = np.tanh(X @ W1 + b1)
        return A, A @ W2.T + b2

    @staticmethod
    def _task_losses(pred: np.ndarray, Y: np.ndarray, masks: np.ndarray) -> list[float]:
        sq = (pred - Y) ** 2
        return [float(np.sum(sq[m, t]) / max(int(m.sum()), 1)) for t, m in enumerate(masks)]

    def eval(self, w: Tensor) -> list[float]:
        _, pred = self._forward(w, self.inputs)
        return self._task_losses(pred, self.targets, self.row_masks)

    def holdout_losses(self, w: Tensor) -> Optional[list[float]]:
        if self._holdout is None:
            return None
        X, Y, masks = self._holdout
        _, pred = self._forward(w, X)
        return self._task_losses(pred, Y, masks)

    def _backward_parts(self, w: Tensor):
        W1, b1, W2, b2 = self._unpack(w)
        A, pred = self._forward(w, self.inputs)
        # dL_t / dpred, zero outside task t's rows
        R = 2.0 * (pred - self.targets) * self.row_masks.T / self._counts[None, :]
        return A, W2, R

    def _trunk_grad(self, A: np.ndarray, dA: np.ndarray) -> np.ndarray:
        dZ = dA * (1.0 - A * A)
        out = np.zeros(self.dim)
        n_in, h = self.n_inputs, self.hidden
        out[:n_in * h] = (self.inputs.T @ dZ).reshape(-1)
        out[n_in * h:n_in * h + h] = dZ.sum(axis=0)
        return out

    def _head_grad(self, A: np.ndarray, R: np.ndarray, t: int, out: np.ndarray) -> None:
        n_in, h, T = self.n_inputs, self.hidden, self.n_tasks
        w2_start = n_in * h + h
        out[w2_start + t * h:w2_start + (t + 1) * h] += A.T @ R[:, t]
        out[w2_start + T * h + t] += R[:, t].sum()

    def grad(self, w: Tensor) -> TaskGradients:
        A, W2, R = self._backward_parts(w)
        grads = []
        for t in range(self.n_tasks):
            g = self._trunk_grad(A, np.outer(R[:, t], W2[t]))
            self._head_grad(A, R, t, g)
            grads.append(Tensor.wrap(g))
        return TaskGradients(grads=tuple(grads))

    def layer_grads(self, w: Tensor) -> SharedLayerGradients:
        A, W2, R = self._backward_parts(w)
        head = np.zeros(self.dim)
        for t in range(self.n_tasks):
            self._head_grad(A, R, t, head)
        activation_grads = tuple(Tensor.wrap(np.outer(R[:, t], W2[t])) for t in range(self.n_tasks))
        frozen_A = _frozen(A)

        def backprop(combined: Tensor) -> Tensor:
            return Tensor.wrap(self._trunk_grad(frozen_A, combined.array))

        return SharedLayerGradients(
            tasks=TaskGradients(
                grads=activation_grads,
                batch_separated=self.batch_separated,
                activations=Tensor.wrap(frozen_A),
            ),
            head_grad=Tensor.wrap(head),
            backprop=backprop,
        )

    def init_weights(self, rng: RngStream) -> Tensor:
        n_in, h, t = self.n_inputs, self.hidden, self.n_tasks
        W1 = rng.normal((n_in, h), scale=1.0 / np.sqrt(n_in))
        W2 = rng.normal((t, h), scale=1.0 / np.sqrt(h))
        return Tensor.wrap(np.concatenate([W1.reshape(-1), np.zeros(h), W2.reshape(-1), np.zeros(t)]))


def sines_problem(params: Optional[SineParams] = None) -> SinesProblem:
    return SinesProblem(params or SineParams())


def quad_pair_problem(c: float = 1.0) -> QuadPairProblem:
    return QuadPairProblem(c)


def mlp_multitask_problem(seed: int = 0, hidden: int = 16, n_tasks: int = 4,
                          n_samples: int = 64, n_inputs: int = 6) -> SharedTrunkProblem:
    """
    Shared tanh trunk with `n_tasks` regression heads on a frozen synthetic dataset.

    Task targets are tanh projections along directions that share a common
    component but carry task-specific signs, so task gradients conflict.
    """
    if hidden < 1:
        raise ConfigError(f"hidden must be >= 1, got {hidden}")
    if n_tasks < 1:
        raise ConfigError(f"n_tasks must be >= 1, got {n_tasks}")
    rng = RngStream(seed, DATA_STREAM)
    X = rng.normal((n_samples, n_inputs))
    common = rng.normal((n_inputs,))
    own = rng.normal((n_tasks, n_inputs))
    signs = np.where(rng.random((n_tasks,)) < 0.5, -1.0, 1.0)
    directions = common[None, :] * signs[:, None] + own
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    Y = np.tanh(X @ directions.T) + 0.1 * rng.normal((n_samples, n_tasks))
    return SharedTrunkProblem(
        X, Y, hidden,
        name="mlp",
        describe={"name": "mlp", "seed": seed, "hidden": hidden, "n_tasks": n_tasks,
                  "n_samples": n_samples, "n_inputs": n_inputs},
    )


def transfer_toy_problem(seed: int = 0, hidden: int = 8, n_inputs: int = 4, n_source: int = 256,
                         n_transfer: int = 32, n_holdout: int = 64) -> SharedTrunkProblem:
    """
    Mixed-batch transfer toy.

    A large source set and a small, noisier transfer set share one trunk and
    feed separate heads. The batch is half source, half transfer, so each
    loss's activation gradient is zero on the other loss's rows. Source rows
    not in the batch and a fresh transfer sample form the held-out sets.
    """
    if n_source < n_transfer:
        raise ConfigError(f"Source set ({n_source}) must be at least as large as the transfer set ({n_transfer})")
    rng = RngStream(seed, DATA_STREAM)
    a_src = rng.normal((n_inputs,))
    a_src /= np.linalg.norm(a_src)
    a_tr = a_src + 0.5 * rng.normal((n_inputs,))
    a_tr /= np.linalg.norm(a_tr)

    Xs = rng.normal((n_source, n_inputs))
    ys = np.tanh(Xs @ a_src) + 0.05 * rng.normal((n_source,))
    Xt = rng.normal((n_transfer + n_holdout, n_inputs))
    yt = np.tanh(Xt @ a_tr) + 0.2 * rng.normal((n_transfer + n_holdout,))

    m = n_transfer
    order = rng.permutation(n_source)
    batch_src, rest_src = order[:m], order[m:]

    X = np.concatenate([Xs[batch_src], Xt[:m]])
    Y = np.zeros((2 * m, 2))
    Y[:m, 0] = ys[batch_src]
    Y[m:, 1] = yt[:m]
    masks = np.zeros((2, 2 * m), dtype=bool)
    masks[0, :m] = True
    masks[1, m:] = True

    holdout = None
    if n_holdout > 0 and rest_src.size > 0:
        hs, ht = rest_src.size, n_holdout
        Xh = np.concatenate([Xs[rest_src], Xt[m:]])
        Yh = np.zeros((hs + ht, 2))
        Yh[:hs, 0] = ys[rest_src]
        Yh[hs:, 1] = yt[m:]
        mh = np.zeros((2, hs + ht), dtype=bool)
        mh[0, :hs] = True
        mh[1, hs:] = True
        holdout = (_frozen(Xh), _frozen(Yh), mh)

    return SharedTrunkProblem(
        X, Y, hidden,
        row_masks=masks,
        name="transfer",
        batch_separated=True,
        holdout=holdout,
        task_names=("source", "transfer"),
        describe={"name": "transfer", "seed": seed, "hidden": hidden, "n_inputs": n_inputs,
                  "n_source": n_source, "n_transfer": n_transfer, "n_holdout": n_holdout},
    )


PROBLEM_FACTORIES: dict[str, Callable[..., Problem]] = {
    "sines": sines_problem,
    "quad_pair": quad_pair_problem,
    "mlp": mlp_multitask_problem,
    "transfer": transfer_toy_problem,
}


def build_problem(name: str, **params: Any) -> Problem:
    """Construct a registered problem by name."""
    factory = PROBLEM_FACTORIES.get(name)
    if factory is None:
        raise ConfigError(f"Unknown problem '{name}' (known: {', '.join(sorted(PROBLEM_FACTORIES))})")
    if name == "sines" and "pairs" in params:
        pairs = tuple((float(a), float(b)) for a, b in params.pop("pairs"))
        params["params"] = SineParams(pairs)
    try:
        return factory(**params)
    except TypeError as e:
        raise ConfigError(f"Bad parameters for problem '{name}': {e}") from e


def finite_diff_check(p: Problem, w: Tensor, h: float = 1e-6) -> float:
    """
    Largest relative discrepancy between analytic and central-difference gradients.

    Errors are measured per task against that task's largest gradient entry,
    with an absolute floor of 1e-8 on the denominator.
    """
    if not h > 0:
        raise PreconditionError(f"Step h must be > 0, got {h}")
    w0 = w.array.reshape(-1)
    analytic = np.stack([g.array.reshape(-1) for g in p.grad(w).grads])
    fd = np.zeros_like(analytic)
    for j in range(w0.size):
        e = np.zeros_like(w0)
        e[j] = h
        plus = np.asarray(p.eval(Tensor(w0 + e, w.shape)))
        minus = np.asarray(p.eval(Tensor(w0 - e, w.shape)))
        fd[:, j] = (plus - minus) / (2.0 * h)
    worst = 0.0
    for t in range(analytic.shape[0]):
        scale = max(float(np.max(np.abs(analytic[t]))) if analytic.shape[1] else 0.0, 1e-8)
        worst = max(worst, float(np.max(np.abs(fd[t] - analytic[t]))) / scale)
    return worst


def grid_search_min(p: Problem, lo: float = -10.0, hi: float = 10.0, step: float = 1e-4) -> tuple[float, float]:
    """
    Global minimum of the summed loss of a one-dimensional problem.

    Dense grid search, then a bounded scalar refinement inside the winning
    cell's neighbourhood.
    """
    if not isinstance(p, OneDimProblem):
        raise PreconditionError(f"grid_search_min needs a one-dimensional problem, got {p.name} (dim={p.dim})")
    if not lo < hi:
        raise PreconditionError(f"Need lo < hi, got [{lo}, {hi}]")
    if not step > 0:
        raise PreconditionError(f"Grid step must be > 0, got {step}")

    n = max(int(round((hi - lo) / step)), 1)
    xs = np.linspace(lo, hi, n + 1)
    totals = p.losses_at(xs).sum(axis=0)
    i = int(np.argmin(totals))
    best_x, best_l = float(xs[i]), float(totals[i])

    a, b = float(xs[max(i - 1, 0)]), float(xs[min(i + 1, n)])
    res = minimize_scalar(
        lambda x: float(p.losses_at(np.array([x])).sum()),
        bounds=(a, b),
        method="bounded",
        options={"xatol": 1e-12},
    )
    if res.success and float(res.fun) <= best_l:
        best_x, best_l = float(res.x), float(res.fun)
    logger.debug("grid_search_min(%s) -> x*=%.8f L*=%.10f", p.name, best_x, best_l)
    return best_x, best_l
