"""
Gradient combiners for multi-loss training.

Every combiner maps a `TaskGradients` (one gradient per loss over one shared
variable) to a single update tensor:

  * `graddrop`        sign-consistency masking with leak mixing
  * `naive_sum`       plain sum of the task gradients
  * `clip_global_norm` norm clipping applied to any combined gradient
  * `pcgrad`          conflicting-gradient projection (static or iterative)
  * `mgda_minnorm`    min-norm point of the convex hull (pairwise Frank-Wolfe)
  * `gradnorm_step`   task-weight update that equalizes training rates

`graddrop_rows`, `pcgrad_rows` and `mgda_rows` run the same combiners on one
scalar weight for many independent trials at once.

Random GradDrop is `graddrop` with k=0; it has no code path of its own.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError, PreconditionError, ShapeError
from .ndcore import RngStream, Tensor, l2_norm, sign

logger = logging.getLogger(__name__)

MGDA_MAX_ITERS = 250
MGDA_TOL = 1e-9


@dataclass(frozen=True)
class TaskGradients:
    """Per-task gradients over one shared variable, in task order."""
    grads: tuple[Tensor, ...]
    batch_separated: bool = False
    activations: Optional[Tensor] = None

    def __post_init__(self):
        grads = tuple(self.grads)
        object.__setattr__(self, "grads", grads)
        if not grads:
            raise ContractError("TaskGradients needs at least one task gradient")
        shape = grads[0].shape
        for i, g in enumerate(grads[1:], start=2):
            if g.shape != shape:
                raise ShapeError(f"Task {i} gradient has shape {g.shape}, task 1 has {shape}")
        if self.batch_separated and self.activations is None:
            raise ContractError("Batch-separated gradients must carry their activations")
        if self.activations is not None:
            if self.activations.shape != shape:
                raise ShapeError(
                    f"Activations have shape {self.activations.shape}, gradients have {shape}"
                )
            if len(shape) == 0:
                raise ShapeError("Activation gradients need a leading batch axis")

    @property
    def n_tasks(self) -> int:
        return len(self.grads)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.grads[0].shape

    def scaled(self, weights: Sequence[float]) -> "TaskGradients":
        if len(weights) != self.n_tasks:
            raise ConfigError(f"Got {len(weights)} task weights for {self.n_tasks} tasks")
        return replace(self, grads=tuple(g * float(w) for g, w in zip(self.grads, weights)))


@dataclass(frozen=True)
class CombinerConfig:
    """
    GradDrop knobs.

    `leaks=None` means all-zero leaks for whatever task count is combined.
    k=1, zero leaks and marginalize=True is the standard configuration.
    """
    k: float = 1.0
    leaks: Optional[tuple[float, ...]] = None
    marginalize: bool = True
    renormalize: bool = False
    rng: Optional[RngStream] = field(default=None, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.k) or self.k < 0:
            raise ConfigError(f"Activation slope k must be a finite value >= 0, got {self.k}")
        if self.leaks is not None:
            leaks = tuple(float(x) for x in self.leaks)
            for i, leak in enumerate(leaks, start=1):
                if not 0.0 <= leak <= 1.0:
                    raise ConfigError(f"Leak for task {i} must lie in [0, 1], got {leak}")
            object.__setattr__(self, "leaks", leaks)

    def leaks_for(self, n_tasks: int) -> tuple[float, ...]:
        if self.leaks is None:
            return (0.0,) * n_tasks
        if len(self.leaks) != n_tasks:
            raise ConfigError(f"Got {len(self.leaks)} leak values for {n_tasks} tasks")
        return self.leaks


@dataclass(frozen=True)
class MaskSet:
    """Masks M_1..M_n, the purity tensor they came from, and the keep fraction."""
    masks: tuple[Tensor, ...]
    purity: Tensor
    keep_fraction: float


def _arrays(G: Union[TaskGradients, Sequence[Tensor]]) -> list[np.ndarray]:
    tensors = G.grads if isinstance(G, TaskGradients) else tuple(G)
    if not tensors:
        raise PreconditionError("At least one task gradient is required")
    shape = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=2):
        if t.shape != shape:
            raise ShapeError(f"Task {i} has shape {t.shape}, task 1 has {shape}")
    return [t.array for t in tensors]


def _purity_array(arrays: Sequence[np.ndarray]) -> np.ndarray:
    total = arrays[0].copy()
    mass = np.abs(arrays[0])
    for a in arrays[1:]:
        total += a
        mass += np.abs(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = 0.5 * (1.0 + total / mass)
    p = np.where(mass > 0, p, 0.5)
    return np.clip(p, 0.0, 1.0)


def purity(G: Union[TaskGradients, Sequence[Tensor]]) -> Tensor:
    """Positive sign purity, elementwise. 0.5 wherever every gradient is zero."""
    return Tensor.wrap(_purity_array(_arrays(G)))


def _activation_array(p: np.ndarray, k: float) -> np.ndarray:
    return np.clip(k * (p - 0.5) + 0.5, 0.0, 1.0)


def activation(P: Tensor, k: float) -> Tensor:
    """Clipped linear keep-positive probability f(P) = clip(k(P-0.5)+0.5, 0, 1)."""
    if k < 0:
        raise ConfigError(f"Activation slope k must be >= 0, got {k}")
    return Tensor.wrap(_activation_array(P.array, k))


def _mask_arrays(arrays: Sequence[np.ndarray], fp: np.ndarray, u: np.ndarray) -> list[np.ndarray]:
    keep_pos = fp > u
    keep_neg = fp < u
    return [(keep_pos & (g > 0)) | (keep_neg & (g < 0)) for g in arrays]


def _masks_from(arrays: Sequence[np.ndarray], fp: np.ndarray, u: np.ndarray) -> tuple[list[np.ndarray], float]:
    masks = _mask_arrays(arrays, fp, u)
    kept = sum(int(np.count_nonzero(m)) for m in masks)
    nonzero = sum(int(np.count_nonzero(g)) for g in arrays)
    keep_fraction = kept / nonzero if nonzero else 1.0
    return masks, keep_fraction


def sample_masks(G: Union[TaskGradients, Sequence[Tensor]], fP: Tensor, rng: RngStream) -> MaskSet:
    """
    Draw one U per position, shared by every task, and build the masks.

    A task keeps its entry when it is positive and f(P) > U, or negative and
    f(P) < U. Zero entries never match and get mask 0.
    """
    arrays = _arrays(G)
    if fP.shape != arrays[0].shape:
        raise ShapeError(f"f(P) has shape {fP.shape}, gradients have {arrays[0].shape}")
    u = rng.random(fP.shape)
    masks, keep = _masks_from(arrays, fP.array, u)
    return MaskSet(
        masks=tuple(Tensor.wrap(m.astype(np.float64)) for m in masks),
        purity=Tensor.wrap(_purity_array(arrays)),
        keep_fraction=keep,
    )


def batch_marginalize(A: Tensor, grad: Tensor) -> Tensor:
    """Sum of sign(A) ∘ grad over the leading (batch) axis."""
    if A.shape != grad.shape:
        raise ShapeError(f"Activations {A.shape} and gradient {grad.shape} must share a shape")
    if grad.ndim == 0:
        raise ShapeError("Batch marginalization needs at least one axis")
    return Tensor.wrap(np.sum(sign(A).array * grad.array, axis=0))


def _signed_arrays(tg: TaskGradients, marginalize: bool) -> list[np.ndarray]:
    # Weight-space gradients have no batch axis and nothing to premultiply.
    if tg.activations is None:
        return [g.array for g in tg.grads]
    if tg.batch_separated or marginalize:
        return [batch_marginalize(tg.activations, g).array for g in tg.grads]
    s = sign(tg.activations).array
    return [s * g.array for g in tg.grads]


def graddrop(tg: TaskGradients, cfg: CombinerConfig) -> tuple[Tensor, MaskSet]:
    """
    Sign-consistency masking of the task gradients.

    Masks are computed on the sign-premultiplied (and, when marginalized,
    batch-summed) gradients and applied to the raw gradients, tiled across the
    batch axis where needed. With `renormalize`, the result is rescaled to the
    L2 norm of the plain sum.
    """
    leaks = cfg.leaks_for(tg.n_tasks)
    if cfg.rng is None:
        raise ConfigError("graddrop needs an RngStream in its CombinerConfig")

    signed = _signed_arrays(tg, cfg.marginalize)
    p = _purity_array(signed)
    fp = _activation_array(p, cfg.k)
    u = cfg.rng.random(p.shape)
    masks, keep = _masks_from(signed, fp, u)

    out = np.zeros(tg.shape)
    for leak, m, g in zip(leaks, masks, tg.grads):
        out += (leak + (1.0 - leak) * m) * g.array

    if cfg.renormalize:
        ref = l2_norm(naive_sum(tg))
        cur = float(np.sqrt(np.dot(out.reshape(-1), out.reshape(-1))))
        if ref > 0 and cur > 0 and cur != ref:
            out *= ref / cur

    maskset = MaskSet(
        masks=tuple(Tensor.wrap(m.astype(np.float64)) for m in masks),
        purity=Tensor.wrap(p),
        keep_fraction=keep,
    )
    return Tensor.wrap(out), maskset


def hypothetical_keep_fraction(tg: TaskGradients, rng: RngStream, k: float = 1.0, marginalize: bool = True) -> float:
    """Keep fraction GradDrop would report on these gradients; nothing is applied."""
    signed = _signed_arrays(tg, marginalize)
    fp = _activation_array(_purity_array(signed), k)
    _, keep = _masks_from(signed, fp, rng.random(fp.shape))
    return keep


def naive_sum(tg: TaskGradients) -> Tensor:
    out = np.zeros(tg.shape)
    for g in tg.grads:
        out += g.array
    return Tensor.wrap(out)


def clip_global_norm(g: Tensor, c: float) -> Tensor:
    if not c > 0:
        raise ConfigError(f"Clipping norm must be > 0, got {c}")
    norm = l2_norm(g)
    if norm > c:
        return g * (c / norm)
    return g


def project_conflicting(gi: np.ndarray, gj: np.ndarray) -> np.ndarray:
    """Remove gi's component along gj when the two conflict (negative dot product)."""
    dot = float(np.dot(gi, gj))
    if dot < 0:
        return gi - (dot / float(np.dot(gj, gj))) * gj
    return gi


def pcgrad_project(tg: TaskGradients, rng: RngStream, iterative: bool = False) -> list[Tensor]:
    """
    Projected task gradients.

    Static mode projects against a frozen copy of the original gradients.
    Iterative mode projects against the working gradients, so earlier
    projections feed later ones.
    """
    shape = tg.shape
    work = [g.array.reshape(-1).copy() for g in tg.grads]
    n = len(work)
    if n > 1:
        refs = work if iterative else [w.copy() for w in work]
        for i in rng.permutation(n):
            gi = work[i]
            for j in rng.permutation(n):
                if j == i:
                    continue
                gi = project_conflicting(gi, refs[j])
            work[i] = gi
    return [Tensor.wrap(w.reshape(shape)) for w in work]


def pcgrad(tg: TaskGradients, rng: RngStream, iterative: bool = False) -> Tensor:
    projected = pcgrad_project(tg, rng, iterative=iterative)
    out = np.zeros(tg.shape)
    for p in projected:
        out += p.array
    return Tensor.wrap(out)


def mgda_minnorm(tg: TaskGradients, max_iters: int = MGDA_MAX_ITERS, tol: float = MGDA_TOL) -> tuple[list[float], Tensor]:
    """
    Min-norm point of the convex hull of the task gradients.

    Pairwise Frank-Wolfe on the simplex with exact line search; stops when the
    duality gap x·x - min_j x·g_j drops below `tol`.
    """
    n = tg.n_tasks
    vecs = np.stack([g.array.reshape(-1) for g in tg.grads])
    if n == 1:
        return [1.0], tg.grads[0]
    gram = vecs @ vecs.T
    if not np.any(gram):
        return [1.0 / n] * n, Tensor.zeros(tg.shape)

    gamma = np.zeros(n)
    gamma[int(np.argmin(np.diag(gram)))] = 1.0
    gap = float("inf")
    for _ in range(max_iters):
        grad = gram @ gamma
        xx = float(gamma @ grad)
        t = int(np.argmin(grad))
        gap = xx - float(grad[t])
        if gap < tol:
            break
        active = np.flatnonzero(gamma > 0)
        a = int(active[np.argmax(grad[active])])
        if a == t:
            break
        dd = float(gram[t, t] + gram[a, a] - 2.0 * gram[t, a])
        if dd <= 0:
            break
        slope = float(grad[t] - grad[a])
        eta = min(float(gamma[a]), -slope / dd)
        gamma[t] += eta
        gamma[a] -= eta
        if gamma[a] < 0:
            gamma[a] = 0.0
    else:
        logger.debug("mgda_minnorm hit max_iters=%d with gap %.3e", max_iters, gap)

    combined = (gamma @ vecs).reshape(tg.shape)
    return [float(x) for x in gamma], Tensor.wrap(combined)


# Row variants for scalar weights. Every array is (n_tasks, n_trials); column
# t is one independent trial and never reads another column.

def _row_sum(grads: np.ndarray) -> np.ndarray:
    out = grads[0].copy()
    for row in grads[1:]:
        out += row
    return out


def graddrop_rows(grads: np.ndarray, cfg: CombinerConfig, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    `graddrop` on one scalar weight per trial, with the draw U of trial t in u[t].

    Returns the combined gradient and the keep fraction of every trial.
    `cfg.rng` is not used.
    """
    if grads.ndim != 2 or u.shape != grads.shape[1:]:
        raise ShapeError(f"Expected (n_tasks, n_trials) gradients and one draw per trial, "
                         f"got {grads.shape} and {u.shape}")
    leaks = cfg.leaks_for(grads.shape[0])
    rows = list(grads)
    fp = _activation_array(_purity_array(rows), cfg.k)
    masks = _mask_arrays(rows, fp, u)

    out = np.zeros(grads.shape[1])
    for leak, m, g in zip(leaks, masks, rows):
        out += (leak + (1.0 - leak) * m) * g

    kept = np.sum(masks, axis=0)
    nonzero = np.count_nonzero(grads, axis=0)
    keep = np.where(nonzero > 0, kept / np.maximum(nonzero, 1), 1.0)

    if cfg.renormalize:
        ref = np.abs(_row_sum(grads))
        cur = np.abs(out)
        rescale = (ref > 0) & (cur > 0) & (cur != ref)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(rescale, out * (ref / cur), out)
    return out, keep


def pcgrad_rows(grads: np.ndarray, orders: np.ndarray, iterative: bool = False) -> np.ndarray:
    """
    `pcgrad` on one scalar weight per trial.

    orders[t] is an (n_tasks + 1, n_tasks) stack of task orders for trial t:
    the outer order first, then the inner order used at each outer position.
    """
    n, n_trials = grads.shape
    if orders.shape != (n_trials, n + 1, n):
        raise ShapeError(f"Expected task orders of shape {(n_trials, n + 1, n)}, got {orders.shape}")
    work = grads.copy()
    if n > 1:
        refs = work if iterative else grads.copy()
        cols = np.arange(n_trials)
        for pos in range(n):
            i = orders[:, 0, pos]
            gi = work[i, cols]
            for r in range(n):
                j = orders[:, pos + 1, r]
                gj = refs[j, cols]
                dot = gi * gj
                with np.errstate(divide="ignore", invalid="ignore"):
                    projected = gi - (dot / (gj * gj)) * gj
                gi = np.where((j != i) & (dot < 0), projected, gi)
            work[i, cols] = gi
    return _row_sum(work)


def mgda_rows(grads: np.ndarray) -> np.ndarray:
    """
    `mgda_minnorm` on one scalar weight per trial, in closed form.

    The hull of scalars holds 0 unless they share a strict sign; otherwise its
    min-norm point is the gradient nearest 0.
    """
    cols = np.arange(grads.shape[1])
    nearest = grads[np.argmin(np.abs(grads), axis=0), cols]
    one_sided = (grads.min(axis=0) > 0) | (grads.max(axis=0) < 0)
    return np.where(one_sided, nearest, 0.0)


def gradnorm_objective(weights: Sequence[float], grad_norms: Sequence[float], targets: Sequence[float]) -> float:
    """Sum_i |w_i ||g_i|| - target_i|, with targets held constant."""
    w = np.asarray(weights, dtype=np.float64)
    return float(np.sum(np.abs(w * np.asarray(grad_norms) - np.asarray(targets))))


def gradnorm_targets(weights: Sequence[float], losses: Sequence[float], grad_norms: Sequence[float],
                     initial_losses: Sequence[float], alpha: float) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    norms = np.asarray(grad_norms, dtype=np.float64)
    ratio = np.asarray(losses, dtype=np.float64) / np.asarray(initial_losses, dtype=np.float64)
    mean_ratio = float(ratio.mean())
    rel = ratio / mean_ratio if mean_ratio > 0 else np.ones_like(ratio)
    return float(np.mean(w * norms)) * rel ** alpha


def gradnorm_step(weights: Sequence[float], losses: Sequence[float], grad_norms: Sequence[float],
                  initial_losses: Sequence[float], alpha: float = 1.0, lr: float = 0.025) -> tuple[float, ...]:
    """
    One step of the GradNorm weight update, renormalized so the weights sum to n.

    The weighted gradient norms w_i ||g_i|| are pulled toward their mean scaled
    by (relative training rate)^alpha.
    """
    n = len(weights)
    if not (len(losses) == len(grad_norms) == len(initial_losses) == n):
        raise ConfigError(
            f"gradnorm_step needs equal-length inputs, got weights={n}, losses={len(losses)}, "
            f"grad_norms={len(grad_norms)}, initial_losses={len(initial_losses)}"
        )
    for i, l0 in enumerate(initial_losses, start=1):
        if not l0 > 0:
            raise ConfigError(f"Initial loss for task {i} must be > 0, got {l0}")

    w = np.asarray(weights, dtype=np.float64)
    norms = np.asarray(grad_norms, dtype=np.float64)
    targets = gradnorm_targets(w, losses, norms, initial_losses, alpha)
    step = np.sign(w * norms - targets) * norms
    w = np.maximum(w - lr * step, 1e-6)
    w = w * (n / float(w.sum()))
    return tuple(float(x) for x in w)


def gradnorm_step_rows(weights: np.ndarray, losses: np.ndarray, grad_norms: np.ndarray,
                       initial_losses: np.ndarray, alpha: float = 1.0, lr: float = 0.025) -> np.ndarray:
    """`gradnorm_step` with one trial per column. The caller checks the initial losses."""
    n = weights.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = losses / initial_losses
        mean_ratio = ratio.mean(axis=0)
        rel = np.where(mean_ratio > 0, ratio / mean_ratio, 1.0)
    targets = np.mean(weights * grad_norms, axis=0) * rel ** alpha
    step = np.sign(weights * grad_norms - targets) * grad_norms
    w = np.maximum(weights - lr * step, 1e-6)
    return w * (n / w.sum(axis=0))


@dataclass(frozen=True)
class GradNormState:
    """Task weights owned by one training loop."""
    weights: tuple[float, ...]
    initial_losses: Optional[tuple[float, ...]] = None
    alpha: float = 1.0
    lr: float = 0.025

    @classmethod
    def start(cls, n_tasks: int, alpha: float = 1.0, lr: float = 0.025) -> "GradNormState":
        return cls(weights=(1.0,) * n_tasks, alpha=alpha, lr=lr)

    def update(self, losses: Sequence[float], grad_norms: Sequence[float]) -> "GradNormState":
        initial = self.initial_losses or tuple(float(x) for x in losses)
        weights = gradnorm_step(self.weights, losses, grad_norms, initial, self.alpha, self.lr)
        return replace(self, weights=weights, initial_losses=initial)
