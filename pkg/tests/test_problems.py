import math

import numpy as np
import pytest

from gradsurgery.combine import CombinerConfig, TaskGradients, graddrop
from gradsurgery.errors import ConfigError, PreconditionError
from gradsurgery.ndcore import RngStream, Tensor
from gradsurgery.problems import (
    OneDimProblem,
    SharedTrunkProblem,
    SineParams,
    build_problem,
    finite_diff_check,
    grid_search_min,
    mlp_multitask_problem,
    quad_pair_problem,
    sines_problem,
    transfer_toy_problem,
)


def random_points(p, n, seed):
    rng = RngStream(seed, 77)
    return [p.init_weights(rng) for _ in range(n)]


def test_sines_losses_in_range():
    p = sines_problem()
    assert p.n_tasks == 5
    for x in np.linspace(-10, 10, 101):
        losses = p.eval(Tensor([x]))
        assert all(0.0 <= v <= 2.0 for v in losses)
        assert 0.0 <= sum(losses) <= 10.0


def test_quad_pair_examples():
    p = quad_pair_problem(1.0)
    tg = p.grad(Tensor([0.0]))
    assert [g.item() for g in tg.grads] == [-2.0, 2.0]
    assert p.eval(Tensor([1.0])) == [0.0, 4.0]


def test_quad_pair_rejects_negative_separation():
    with pytest.raises(ConfigError):
        quad_pair_problem(-1.0)


@pytest.mark.parametrize("w", [Tensor([0.0, 1.0]), Tensor.zeros((0,)), Tensor([[1.0], [2.0]])])
def test_one_dim_problems_reject_other_weight_sizes(w):
    for p in (sines_problem(), quad_pair_problem(1.0)):
        with pytest.raises(ConfigError):
            p.eval(w)
        with pytest.raises(ConfigError):
            p.grad(w)


def test_one_dim_problems_accept_any_single_weight_shape():
    p = quad_pair_problem(1.0)
    assert p.eval(Tensor([[0.5]])) == p.eval(Tensor([0.5]))


def test_sine_task_losses_repeat_with_their_own_period():
    p = sines_problem()
    xs = np.linspace(-10.0, 10.0, 201)
    base = p.losses_at(xs)
    for i, (a, _) in enumerate(p.params.pairs):
        shifted = p.losses_at(xs + 2.0 * math.pi / a)
        np.testing.assert_allclose(shifted[i], base[i], rtol=0, atol=1e-12)


def test_quad_pair_graddrop_at_origin_never_vanishes():
    tg = quad_pair_problem(1.0).grad(Tensor([0.0]))
    ups = 0
    for seed in range(2000):
        value = graddrop(tg, CombinerConfig(rng=RngStream(seed, 1)))[0].item()
        assert value in (2.0, -2.0)
        ups += value == 2.0
    assert abs(ups / 2000 - 0.5) < 0.05


@pytest.mark.parametrize("problem", [
    sines_problem(),
    quad_pair_problem(1.0),
    mlp_multitask_problem(seed=0, hidden=5, n_tasks=3, n_samples=16, n_inputs=3),
    transfer_toy_problem(seed=0, hidden=4, n_inputs=3, n_source=40, n_transfer=8, n_holdout=8),
], ids=["sines", "quad_pair", "mlp", "transfer"])
def test_finite_difference_gradients(problem):
    for w in random_points(problem, 20, seed=1):
        assert finite_diff_check(problem, w, h=1e-6) < 1e-5


def test_quadratic_central_difference_is_near_exact():
    p = quad_pair_problem(1.5)
    for w in random_points(p, 20, seed=2):
        assert finite_diff_check(p, w, h=1e-6) < 1e-7


class _CorruptedQuad(OneDimProblem):
    """quad_pair with its analytic gradient inflated by 10%."""

    def __init__(self):
        self.inner = quad_pair_problem(1.0)
        self.name = "corrupted"
        self.n_tasks = 2

    def losses_at(self, xs):
        return self.inner.losses_at(xs)

    def grads_at(self, xs):
        return 1.1 * self.inner.grads_at(xs)


def test_finite_difference_detects_corruption():
    err = finite_diff_check(_CorruptedQuad(), Tensor([3.0]), h=1e-6)
    assert err == pytest.approx(0.1 / 1.1, rel=1e-3)


def test_mlp_zero_everything_gives_zero_loss_and_gradient():
    p = SharedTrunkProblem(np.zeros((8, 3)), np.zeros((8, 2)), hidden=4)
    w = Tensor.zeros((p.dim,))
    assert p.eval(w) == [0.0, 0.0]
    assert all(not np.any(g.array) for g in p.grad(w).grads)


def test_mlp_single_task_graddrop_is_identity():
    p = mlp_multitask_problem(seed=4, hidden=6, n_tasks=1, n_samples=12, n_inputs=3)
    for seed in range(10):
        w = p.init_weights(RngStream(seed))
        shared = p.layer_grads(w)
        out, _ = graddrop(shared.tasks, CombinerConfig(rng=RngStream(seed, 1)))
        np.testing.assert_array_equal(out.array, shared.tasks.grads[0].array)


def test_layer_grads_assemble_to_weight_gradient():
    p = mlp_multitask_problem(seed=2, hidden=5, n_tasks=3, n_samples=10, n_inputs=4)
    w = p.init_weights(RngStream(8))
    shared = p.layer_grads(w)
    combined = sum((g.array for g in shared.tasks.grads), np.zeros(shared.tasks.shape))
    full = shared.assemble(Tensor(combined))
    direct = sum((g.array for g in p.grad(w).grads), np.zeros(p.dim))
    np.testing.assert_allclose(full.array, direct, rtol=1e-12, atol=1e-14)


def test_problems_are_not_mutated_by_evaluation():
    p = mlp_multitask_problem(seed=0, hidden=4, n_tasks=2, n_samples=8, n_inputs=2)
    before = p.inputs.copy(), p.targets.copy()
    w = p.init_weights(RngStream(0))
    p.eval(w), p.grad(w), p.layer_grads(w)
    np.testing.assert_array_equal(p.inputs, before[0])
    np.testing.assert_array_equal(p.targets, before[1])


def test_transfer_toy_rows_are_disjoint():
    p = transfer_toy_problem(seed=1)
    w = p.init_weights(RngStream(3))
    shared = p.layer_grads(w)
    source, transfer = (g.array for g in shared.tasks.grads)
    assert shared.tasks.batch_separated
    src_rows = np.any(source != 0, axis=1)
    tr_rows = np.any(transfer != 0, axis=1)
    assert not np.any(src_rows & tr_rows)
    assert p.task_names == ("source", "transfer")
    assert p.holdout_losses(w) is not None


def test_transfer_toy_unmarginalized_purity_is_trivial():
    p = transfer_toy_problem(seed=2)
    shared = p.layer_grads(p.init_weights(RngStream(5)))
    A = shared.tasks.activations.array
    signed = [np.sign(A) * g.array for g in shared.tasks.grads]
    total = signed[0] + signed[1]
    mass = np.abs(signed[0]) + np.abs(signed[1])
    P = np.where(mass > 0, 0.5 * (1 + total / np.where(mass > 0, mass, 1.0)), 0.5)
    assert set(np.unique(P)) <= {0.0, 0.5, 1.0}


def test_transfer_marginalization_changes_masks():
    p = transfer_toy_problem(seed=3)
    differing, total = 0, 0
    for trial in range(10):
        shared = p.layer_grads(p.init_weights(RngStream(trial)))
        tg = shared.tasks
        plain = TaskGradients(grads=tg.grads, activations=tg.activations)
        _, marg = graddrop(tg, CombinerConfig(rng=RngStream(trial, 1)))
        _, raw = graddrop(plain, CombinerConfig(marginalize=False, rng=RngStream(trial, 1)))
        for mm, g, mr in zip(marg.masks, tg.grads, raw.masks):
            applied = np.broadcast_to(mm.array, g.shape)
            differing += int(np.count_nonzero((applied != mr.array) & (g.array != 0)))
            total += int(np.count_nonzero(g.array))
    assert differing / total >= 0.01


def test_grid_search_quad_pair():
    x, loss = grid_search_min(quad_pair_problem(1.0), -5.0, 5.0, 1e-3)
    assert x == pytest.approx(0.0, abs=1e-6)
    assert loss == pytest.approx(2.0, abs=1e-10)


def test_grid_search_single_sine():
    x, loss = grid_search_min(sines_problem(SineParams(((1.0, 0.0),))), -5.0, 5.0, 1e-3)
    assert x == pytest.approx(-math.pi / 2, abs=1e-5)
    assert loss == pytest.approx(0.0, abs=1e-10)


def test_grid_search_five_sines_beats_dense_grid():
    p = sines_problem()
    x, loss = grid_search_min(p, -10.0, 10.0, 1e-4)
    xs = np.linspace(-10.0, 10.0, 20_001)
    assert loss <= float(p.losses_at(xs).sum(axis=0).min()) + 1e-12
    assert -10.0 <= x <= 10.0


def test_grid_search_needs_one_dimension():
    with pytest.raises(PreconditionError):
        grid_search_min(mlp_multitask_problem(hidden=2, n_tasks=2, n_samples=4, n_inputs=2))


def test_build_problem():
    assert build_problem("sines", pairs=[[1.0, 0.0], [2.0, 0.5]]).n_tasks == 2
    assert build_problem("quad_pair", c=0.0).c == 0.0
    with pytest.raises(ConfigError):
        build_problem("nope")
    with pytest.raises(ConfigError):
        build_problem("quad_pair", width=3)
