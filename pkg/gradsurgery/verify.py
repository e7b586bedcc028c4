"""
Numerical checks of GradDrop's update statistics and fixed-point behaviour.

All loss changes use the linear model dL = -(sum of gradients) . update at
unit learning rate. Monte Carlo reports carry standard errors, and every
empirical comparison is made inside a sigma band.

Suites (see `run_suite`), each also reachable by its descriptive alias:

    prop1       joint-minimum   zero update exactly at joint minima, a coin-flip step elsewhere
    prop2       norm-growth     expected update norm grows away from a component minimum
    prop3       update-stats    mean and variance of dL against the closed forms; k=1 matches SGD
    corollary   steeper         steeper activations give larger mean decrease and smaller variance
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .combine import CombinerConfig, TaskGradients, graddrop
from .errors import ConfigError, DomainError, PreconditionError
from .ndcore import RngStream, Tensor, l2_norm
from .problems import Problem, SineParams, quad_pair_problem, sines_problem

logger = logging.getLogger(__name__)

MIN_SAMPLES = 10_000
SUITES = ("prop1", "prop2", "prop3", "corollary")
SUITE_ALIASES = {
    "joint-minimum": "prop1",
    "norm-growth": "prop2",
    "update-stats": "prop3",
    "steeper": "corollary",
}


@dataclass(frozen=True)
class StatReport:
    """Monte Carlo estimate of dL next to its exact value."""
    mean: float
    var: float
    expected_mean: float
    expected_var: float
    samples: int
    mean_se: float
    var_se: float

    @staticmethod
    def _z(diff: float, se: float) -> float:
        return diff / max(se, 1e-12)

    @property
    def z_mean(self) -> float:
        return self._z(self.mean - self.expected_mean, self.mean_se)

    @property
    def z_var(self) -> float:
        return self._z(self.var - self.expected_var, self.var_se)

    def consistent(self, sigmas: float = 3.0, var_rel: float | None = None) -> bool:
        """Mean within `sigmas` standard errors; variance within `sigmas` or within `var_rel` relative error."""
        if abs(self.z_mean) > sigmas:
            return False
        if var_rel is None:
            return abs(self.z_var) <= sigmas
        return abs(self.var - self.expected_var) <= var_rel * abs(self.expected_var) + 1e-12


def _split(grads: Sequence[float]) -> tuple[float, float]:
    g = np.asarray(grads, dtype=np.float64)
    return float(g[g > 0].sum()), float(-g[g < 0].sum())


def closed_form_stats(p: float, n: float, k: float) -> tuple[float, float]:
    """
    Exact mean and variance of dL for the linear activation with slope k in [0, 1].

    p and n are the total positive and total negative gradient mass.
    """
    if p < 0 or n < 0 or not p + n > 0:
        raise DomainError(f"closed_form_stats needs p, n >= 0 with p + n > 0, got p={p}, n={n}")
    if not 0.0 <= k <= 1.0:
        raise DomainError(f"closed_form_stats covers k in [0, 1], got {k}")
    d2 = (p - n) ** 2
    mean = -0.5 * (k + 1.0) * d2
    var = 0.25 * d2 * (d2 * (-k * k - 1.0) + 2.0 * p * p + 2.0 * n * n)
    return mean, var


def enumerate_delta_loss(grads: Sequence[float], k: float) -> tuple[float, float]:
    """
    Exact mean and variance of dL for scalar gradients, any k >= 0.

    One uniform draw decides the kept sign: all positive entries survive with
    probability f(P), otherwise all negative entries survive.
    """
    if not k >= 0:
        raise ConfigError(f"Activation slope k must be >= 0, got {k}")
    p, n = _split(grads)
    if p + n == 0:
        return 0.0, 0.0
    total = p - n
    fp = min(max(k * (p / (p + n) - 0.5) + 0.5, 0.0), 1.0)
    keep_pos, keep_neg = -total * p, total * n
    mean = fp * keep_pos + (1.0 - fp) * keep_neg
    second = fp * keep_pos ** 2 + (1.0 - fp) * keep_neg ** 2
    return mean, max(second - mean * mean, 0.0)


def _expected(grads: Sequence[float], k: float) -> tuple[float, float]:
    p, n = _split(grads)
    if p + n > 0 and k <= 1.0:
        return closed_form_stats(p, n, k)
    return enumerate_delta_loss(grads, k)


def _tiled(grads: Sequence[float], samples: int) -> TaskGradients:
    return TaskGradients(grads=tuple(Tensor.wrap(np.full(samples, float(g))) for g in grads))


def mc_delta_loss(grads: Sequence[float], k: float, samples: int, rng: RngStream) -> StatReport:
    """
    Monte Carlo mean and variance of dL over GradDrop's randomness.

    Each sample is an independent GradDrop draw on the same scalar gradient
    set; the draws are vectorized by tiling every gradient along a sample axis.
    """
    if samples < MIN_SAMPLES:
        raise PreconditionError(f"Monte Carlo estimates need >= {MIN_SAMPLES} samples, got {samples}")
    if not grads:
        raise PreconditionError("mc_delta_loss needs at least one gradient")
    total = float(np.sum(grads))
    out, _ = graddrop(_tiled(grads, samples), CombinerConfig(k=k, marginalize=False, renormalize=False, rng=rng))
    dl = -total * out.array
    mean = float(dl.mean())
    centered = dl - mean
    var = float(centered.var(ddof=1))
    m4 = float(np.mean(centered ** 4))
    expected_mean, expected_var = _expected(grads, k)
    return StatReport(
        mean=mean,
        var=var,
        expected_mean=expected_mean,
        expected_var=expected_var,
        samples=samples,
        mean_se=math.sqrt(var / samples),
        var_se=math.sqrt(max(m4 - var * var, 0.0) / samples),
    )


@dataclass(frozen=True)
class MonotonicityReport:
    ks: tuple[float, ...]
    reports: tuple[StatReport, ...]
    abs_means: tuple[float, ...]
    variances: tuple[float, ...]

    @property
    def closed_form_monotone(self) -> bool:
        """|E| nondecreasing and Var nonincreasing along the k grid, exactly."""
        tol = 1e-12 * max([1.0, *self.abs_means, *self.variances])
        mean_ok = all(b >= a - tol for a, b in zip(self.abs_means, self.abs_means[1:]))
        var_ok = all(b <= a + tol for a, b in zip(self.variances, self.variances[1:]))
        return mean_ok and var_ok

    def empirical_consistent(self, sigmas: float = 3.0) -> bool:
        return all(r.consistent(sigmas) for r in self.reports)


def monotonicity_sweep(grads: Sequence[float], k_grid: Sequence[float], samples: int,
                       rng: RngStream) -> MonotonicityReport:
    ks = tuple(float(k) for k in k_grid)
    if not ks:
        raise PreconditionError("k_grid is empty")
    if any(b < a for a, b in zip(ks, ks[1:])) or ks[0] < 0 or ks[-1] > 1:
        raise PreconditionError(f"k_grid must be sorted ascending within [0, 1], got {ks}")
    reports = tuple(mc_delta_loss(grads, k, samples, rng) for k in ks)
    exact = [_expected(grads, k) for k in ks]
    return MonotonicityReport(
        ks=ks,
        reports=reports,
        abs_means=tuple(abs(m) for m, _ in exact),
        variances=tuple(v for _, v in exact),
    )


@dataclass(frozen=True)
class SteeperReport:
    k_steep: float
    k_shallow: float
    exact_steep: tuple[float, float]
    exact_shallow: tuple[float, float]
    mc_steep: StatReport
    mc_shallow: StatReport

    @property
    def exact_ordered(self) -> bool:
        (m1, v1), (m2, v2) = self.exact_steep, self.exact_shallow
        tol = 1e-12 * max(1.0, abs(m1), abs(m2), v1, v2)
        return m1 <= m2 + tol and m2 <= tol and v1 <= v2 + tol

    def empirical_ordered(self, sigmas: float = 3.0) -> bool:
        a, b = self.mc_steep, self.mc_shallow
        mean_band = sigmas * math.hypot(a.mean_se, b.mean_se)
        var_band = sigmas * math.hypot(a.var_se, b.var_se)
        return a.mean <= b.mean + mean_band and b.mean <= mean_band and a.var <= b.var + var_band


def steeper_compare(k_steep: float, k_shallow: float, grads: Sequence[float], samples: int,
                    rng: RngStream) -> SteeperReport:
    """Compare two clipped-linear activations, the first at least as steep as the second."""
    if not k_steep >= k_shallow >= 0:
        raise PreconditionError(f"Need k_steep >= k_shallow >= 0, got {k_steep} and {k_shallow}")
    return SteeperReport(
        k_steep=k_steep,
        k_shallow=k_shallow,
        exact_steep=enumerate_delta_loss(grads, k_steep),
        exact_shallow=enumerate_delta_loss(grads, k_shallow),
        mc_steep=mc_delta_loss(grads, k_steep, samples, rng),
        mc_shallow=mc_delta_loss(grads, k_shallow, samples, rng),
    )


def check_joint_minimum(p: Problem, w: Tensor, eps: float = 1e-3) -> bool:
    """True iff every task gradient at w has L2 norm below eps."""
    if not eps > 0:
        raise PreconditionError(f"eps must be > 0, got {eps}")
    return all(l2_norm(g) < eps for g in p.grad(w).grads)


@dataclass(frozen=True)
class NormGrowthReport:
    radii: tuple[float, ...]
    means: tuple[float, ...]
    ses: tuple[float, ...]
    sigmas: float = 3.0

    def _steps(self):
        return zip(self.means, self.means[1:], self.ses, self.ses[1:])

    @property
    def nondecreasing(self) -> bool:
        return all(b >= a - self.sigmas * math.hypot(sa, sb) for a, b, sa, sb in self._steps())

    @property
    def strictly_increasing(self) -> bool:
        return all(b > a for a, b, _, _ in self._steps())


def check_norm_growth(p: Problem, w_star: Tensor, direction: Tensor, radii: Sequence[float],
                      samples: int, rng: RngStream, k: float = 1.0) -> NormGrowthReport:
    """
    Expected GradDrop update norm at w_star + d * direction for each radius d.

    w_star must be a minimum of at least one component loss.
    """
    if samples < MIN_SAMPLES:
        raise PreconditionError(f"Monte Carlo estimates need >= {MIN_SAMPLES} samples, got {samples}")
    if direction.shape != w_star.shape:
        raise PreconditionError(f"direction shape {direction.shape} differs from w_star shape {w_star.shape}")
    rs = tuple(float(r) for r in radii)
    if not rs or rs[0] < 0 or any(b < a for a, b in zip(rs, rs[1:])):
        raise PreconditionError(f"radii must be nonnegative and sorted ascending, got {rs}")
    if min(l2_norm(g) for g in p.grad(w_star).grads) >= 1e-8:
        raise PreconditionError("w_star is not a minimum of any component loss")

    cfg = CombinerConfig(k=k, marginalize=False, renormalize=False, rng=rng)
    means, ses = [], []
    for r in rs:
        tg = p.grad(w_star + direction * r)
        tiled = TaskGradients(grads=tuple(
            Tensor.wrap(np.broadcast_to(g.array.reshape(-1), (samples, g.size)).copy()) for g in tg.grads
        ))
        out, _ = graddrop(tiled, cfg)
        norms = np.sqrt(np.sum(out.array ** 2, axis=1))
        means.append(float(norms.mean()))
        ses.append(float(norms.std(ddof=1) / math.sqrt(samples)))
    return NormGrowthReport(radii=rs, means=tuple(means), ses=tuple(ses))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.checks.append(CheckResult(name, bool(passed), detail))
        logger.debug("[%s] %s: %s %s", self.name, name, "pass" if passed else "FAIL", detail)


def _joint_minimum_suite(samples: int, seed: int) -> SuiteResult:
    suite = SuiteResult("joint-minimum")
    origin = Tensor([0.0])
    seeds = min(samples, MIN_SAMPLES)

    apart = quad_pair_problem(1.0)
    suite.add("separated minima are not joint", not check_joint_minimum(apart, origin))
    tg = apart.grad(origin)
    updates = np.array([
        graddrop(tg, CombinerConfig(rng=RngStream(seed + s, 1)))[0].item() for s in range(seeds)
    ])
    frac_up = float(np.mean(updates == 2.0))
    suite.add("update never vanishes off a joint minimum", bool(np.all(updates != 0.0)), f"{seeds} seeds")
    suite.add("update is +2 half the time", abs(frac_up - 0.5) <= 0.02, f"fraction {frac_up:.4f}")

    together = quad_pair_problem(0.0)
    suite.add("coincident minima are joint", check_joint_minimum(together, origin))
    tg0 = together.grad(origin)
    zero = all(
        graddrop(tg0, CombinerConfig(rng=RngStream(seed + s, 1)))[0].item() == 0.0 for s in range(seeds)
    )
    suite.add("update vanishes at a joint minimum", zero, f"{seeds} seeds")
    return suite


def _norm_growth_suite(samples: int, seed: int) -> SuiteResult:
    suite = SuiteResult("norm-growth")
    p = quad_pair_problem(1.0)
    report = check_norm_growth(p, Tensor([1.0]), Tensor([1.0]), (0.0, 0.01, 0.05, 0.1),
                               samples, RngStream(seed, 2))
    detail = ", ".join(f"{r:g}:{m:.6f}" for r, m in zip(report.radii, report.means))
    suite.add("expected norm nondecreasing", report.nondecreasing, detail)
    suite.add("expected norm strictly increasing", report.strictly_increasing, detail)

    # sin(x)+1 bottoms out at -pi/2, where the slope-3 sine pulls the other way
    pair = sines_problem(SineParams(((1.0, 0.0), (3.0, 0.5))))
    mixed = check_norm_growth(pair, Tensor([-math.pi / 2]), Tensor([1.0]), (0.0, 0.01, 0.05, 0.1),
                              samples, RngStream(seed, 6))
    detail = ", ".join(f"{r:g}:{m:.6f}" for r, m in zip(mixed.radii, mixed.means))
    suite.add("masks are random off the minimum", all(se > 0 for se in mixed.ses[1:]))
    suite.add("expected norm nondecreasing under random masks", mixed.nondecreasing, detail)
    suite.add("expected norm strictly increasing under random masks", mixed.strictly_increasing, detail)
    return suite


def _update_stats_suite(samples: int, seed: int) -> SuiteResult:
    suite = SuiteResult("update-stats")
    rng = RngStream(seed, 3)

    r = mc_delta_loss([7.0, -3.0], 1.0, samples, rng)
    suite.add("{7,-3} k=1 mean", abs(r.z_mean) <= 3.0, f"mean {r.mean:.4f} vs {r.expected_mean}")
    suite.add("{7,-3} k=1 variance", r.consistent(3.0, var_rel=0.02), f"var {r.var:.3f} vs {r.expected_var}")

    r = mc_delta_loss([3.0, 1.0], 1.0, samples, rng)
    suite.add("all-positive gradients are deterministic", r.mean == -16.0 and r.var == 0.0)

    sweep = monotonicity_sweep([7.0, -3.0], (0.0, 0.25, 0.5, 0.75, 1.0), samples, rng)
    suite.add("closed form monotone in k", sweep.closed_form_monotone)
    suite.add("Monte Carlo consistent across k", sweep.empirical_consistent())

    draws = RngStream(seed, 4)
    exact_ok = True
    for _ in range(100):
        pv, nv = draws.uniform_range(0.0, 10.0, (2,))
        kv = float(draws.random(()))
        cf = closed_form_stats(float(pv), float(nv), kv)
        en = enumerate_delta_loss([float(pv), -float(nv)], kv)
        exact_ok &= all(abs(a - b) <= 1e-12 * max(1.0, abs(a)) for a, b in zip(cf, en))
    suite.add("closed form matches enumeration", exact_ok, "100 random (p, n, k)")

    within = 0
    for _ in range(50):
        grads = draws.normal((int(draws.permutation(4)[0]) + 2,)).tolist()
        r = mc_delta_loss(grads, 1.0, samples, rng)
        within += abs(r.mean + sum(grads) ** 2) <= 3.0 * max(r.mean_se, 1e-12)
    suite.add("k=1 mean equals the SGD decrease", within >= 48, f"{within}/50 within 3 sigma")
    return suite


def _steeper_suite(samples: int, seed: int) -> SuiteResult:
    suite = SuiteResult("steeper")
    rng = RngStream(seed, 5)
    rep = steeper_compare(2.0, 1.0, [7.0, -3.0], samples, rng)
    suite.add("k=2 vs k=1 exact ordering", rep.exact_ordered)
    suite.add("k=2 vs k=1 Monte Carlo ordering", rep.empirical_ordered())
    same = steeper_compare(1.0, 1.0, [7.0, -3.0], samples, rng)
    suite.add("equal slopes give equal statistics", same.exact_steep == same.exact_shallow)
    pos = steeper_compare(2.0, 1.0, [3.0, 1.0], samples, rng)
    suite.add("all-positive gradients are slope independent",
              pos.exact_steep == pos.exact_shallow == (-16.0, 0.0))
    return suite


_SUITES = {
    "prop1": _joint_minimum_suite,
    "prop2": _norm_growth_suite,
    "prop3": _update_stats_suite,
    "corollary": _steeper_suite,
}


def run_suite(name: str, samples: int = 1_000_000, seed: int = 2020) -> list[SuiteResult]:
    """Run one named suite (or its alias), or every suite for 'all'."""
    if name == "all":
        names = list(SUITES)
    elif SUITE_ALIASES.get(name, name) in _SUITES:
        names = [SUITE_ALIASES.get(name, name)]
    else:
        known = ", ".join((*SUITES, *SUITE_ALIASES))
        raise ConfigError(f"Unknown verify suite '{name}' (known: {known}, all)")
    if samples < MIN_SAMPLES:
        raise PreconditionError(f"Monte Carlo estimates need >= {MIN_SAMPLES} samples, got {samples}")
    results = []
    for n in names:
        logger.info("Running verify suite %s (%d samples, seed %d)", n, samples, seed)
        results.append(_SUITES[n](samples, seed))
    return results
