"""Long-running checks over many random instances; run with `pytest -m slow`."""
import itertools
import math
import time

import numpy as np
import pytest

from mapsearch.errors import InvalidProblemError
from mapsearch.models import EDP, AlgorithmKind, Problem
from mapsearch.services import dataset as ds
from mapsearch.services import surrogate
from mapsearch.services.costmodel import access_counts, evaluate, normalized_objective
from mapsearch.services.mapspace import MapSpaceCtx, encode, enumerate_mappings, get_mapping, get_projection, is_member
from mapsearch.services.search import (
    GradSearchConfig,
    SaConfig,
    SearchBudget,
    gradient_search,
    random_search,
    simulated_annealing,
)
from mapsearch.services.simulator import simulate
from mapsearch.services.workload import (
    ExecutionTrace,
    golden_execute,
    problem_presets,
    random_inputs,
    required_flops,
    tensor_footprint,
)

pytestmark = pytest.mark.slow


def _random_problem(kind: AlgorithmKind, rng) -> Problem:
    while True:
        if kind is AlgorithmKind.CONV1D:
            dims = rng.integers(1, 33, size=2)
        else:
            dims = rng.integers(1, 7, size=len(kind.dims))
        try:
            return Problem(kind, tuple(int(d) for d in dims))
        except InvalidProblemError:
            continue


def _train(data, accel, kind, loss="huber"):
    stats = ds.fit_norm(data, accel)
    model = surrogate.build_model(kind, surrogate.TOPOLOGY_PRESETS["desk"], "relu", seed=0, norm=stats)
    return surrogate.train(model, data, surrogate.TrainConfig(epochs=30, loss=loss))


@pytest.fixture(scope="module")
def desk_conv1d_data(tmp_path_factory, desk):
    path = str(tmp_path_factory.mktemp("desk") / "conv1d.csv")
    problem_range = ds.ProblemRange.default(AlgorithmKind.CONV1D)
    ds.generate(desk, AlgorithmKind.CONV1D, problem_range, 50_000, seed=11, path=path)
    return ds.load(path)


@pytest.fixture(scope="module")
def desk_conv1d_fit(desk_conv1d_data, desk):
    return _train(desk_conv1d_data, desk, AlgorithmKind.CONV1D)


@pytest.fixture(scope="module")
def desk_conv_model(tmp_path_factory, desk):
    path = str(tmp_path_factory.mktemp("desk") / "conv.csv")
    problem_range = ds.ProblemRange.default(AlgorithmKind.CONV, N=(1, 4), K=(8, 16), C=(8, 16), H=(6, 10),
                                            W=(6, 10), R=(1, 3), S=(1, 3))
    ds.generate(desk, AlgorithmKind.CONV, problem_range, 30_000, seed=12, path=path)
    return _train(ds.load(path), desk, AlgorithmKind.CONV).model


@pytest.mark.parametrize("kind", list(AlgorithmKind))
def test_counts_and_outputs_match_the_interpreter(desk, kind):
    rng = np.random.default_rng(100)
    for _ in range(70):
        problem = _random_problem(kind, rng)
        m = get_mapping(MapSpaceCtx(problem, desk), rng)
        result = simulate(desk, problem, m, seed=int(rng.integers(1 << 30)))
        assert result.counts == access_counts(problem, m)
        np.testing.assert_array_equal(result.output, golden_execute(problem, result.inputs))


def test_required_flops_match_golden_mac_counts():
    rng = np.random.default_rng(150)
    problems = [Problem(AlgorithmKind.CONV1D, (w, r)) for w in range(1, 7) for r in range(1, w + 1)]
    problems += [Problem(AlgorithmKind.MTTKRP, dims) for dims in itertools.product(range(1, 7), repeat=4)]
    problems += [_random_problem(AlgorithmKind.CONV, rng) for _ in range(150)]
    for p in problems:
        trace = ExecutionTrace()
        golden_execute(p, random_inputs(p, rng), trace)
        assert trace.macs == required_flops(p)
        assert {t: len(words) for t, words in trace.touched.items()} == \
            {t: tensor_footprint(p, t) for t in p.kind.tensors}


@pytest.mark.parametrize("kind", list(AlgorithmKind))
def test_projection_over_random_vectors(desk, kind):
    rng = np.random.default_rng(200)
    problem = _random_problem(kind, rng)
    ctx = MapSpaceCtx(problem, desk)
    length = ctx.layout.length
    for _ in range(1000):
        v = rng.normal(0.0, 4.0, size=length) * rng.choice([1.0, 10.0], size=length)
        m = get_projection(ctx, v)
        assert is_member(ctx, m)
        assert get_projection(ctx, encode(ctx, m)) == m


def test_input_gradient_over_many_points(conv1d_dataset, desk):
    stats = ds.fit_norm(conv1d_dataset, desk)
    rng = np.random.default_rng(300)
    h = 1e-5
    for i in range(100):
        model = surrogate.build_model(AlgorithmKind.CONV1D, (16, 16), "softplus", seed=i, norm=stats)
        x = rng.normal(size=22)
        w = rng.normal(size=12)
        grad = surrogate.input_gradient(model, x, w)
        assert np.all(grad[:2] == 0.0)
        numeric = np.zeros(22)
        for j in range(22):
            up, down = x.copy(), x.copy()
            up[j] += h
            down[j] -= h
            numeric[j] = (surrogate.forward(model, up) @ w - surrogate.forward(model, down) @ w) / (2 * h)
        np.testing.assert_allclose(grad[2:], numeric[2:], rtol=1e-4, atol=1e-7)


def test_normalization_round_trip_on_every_record(conv1d_dataset, desk):
    stats = ds.fit_norm(conv1d_dataset, desk)
    for pid, x, y in zip(conv1d_dataset.pids(), conv1d_dataset.x, conv1d_dataset.y):
        _, yn = ds.apply_norm(stats, x, y)
        np.testing.assert_allclose(ds.invert_norm(stats, yn, pid).as_array(), y, rtol=1e-9)


def test_surrogate_ranks_held_out_mappings(desk_conv1d_data, desk_conv1d_fit):
    assert surrogate.rank_quality(desk_conv1d_fit.model, desk_conv1d_data) >= 0.8
    last = desk_conv1d_fit.curve.iloc[-1]
    assert last["test_loss"] <= 1.5 * last["train_loss"]


def test_huber_ranks_no_worse_than_mse(desk_conv1d_data, desk_conv1d_fit, desk):
    mse = _train(desk_conv1d_data, desk, AlgorithmKind.CONV1D, loss="mse")
    huber_rho = surrogate.rank_quality(desk_conv1d_fit.model, desk_conv1d_data)
    assert huber_rho >= surrogate.rank_quality(mse.model, desk_conv1d_data) - 0.05


def test_gradient_search_gets_within_twice_the_optimum(desk, desk_conv1d_fit):
    problem = Problem(AlgorithmKind.CONV1D, (8, 4))
    ctx = MapSpaceCtx(problem, desk)
    optimum = min(normalized_objective(desk, problem, evaluate(desk, problem, m), EDP)
                  for m in enumerate_mappings(ctx, cap=10 ** 6))
    hits = 0
    for seed in range(20):
        trace = gradient_search(ctx, desk_conv1d_fit.model, GradSearchConfig(seed=seed),
                                SearchBudget(iterations=500))
        hits += trace.true_curve()[-1] <= 2.0 * optimum
    assert hits >= 16


def test_annealing_reaches_the_exact_optimum(tiny):
    ctx = MapSpaceCtx(Problem(AlgorithmKind.CONV1D, (4, 2)), tiny)
    space = list(enumerate_mappings(ctx))
    optimum = min(normalized_objective(tiny, ctx.problem, evaluate(tiny, ctx.problem, m), EDP) for m in space)
    hits = 0
    for seed in range(20):
        trace = simulated_annealing(ctx, SaConfig(seed=seed), SearchBudget(iterations=10 * len(space)))
        hits += trace.best_true_obj == pytest.approx(optimum)
    assert hits >= 18


def test_gradient_search_against_baselines_at_equal_iterations(desk, desk_conv_model):
    ctx = MapSpaceCtx(Problem(AlgorithmKind.CONV, (2, 16, 16, 8, 8, 3, 3)), desk)
    budget = SearchBudget(iterations=1000)
    finals = {"mm": [], "sa": [], "random": []}
    for seed in range(20):
        finals["mm"].append(gradient_search(ctx, desk_conv_model, GradSearchConfig(seed=seed), budget).true_curve()[-1])
        finals["sa"].append(simulated_annealing(ctx, SaConfig(seed=seed), budget).true_curve()[-1])
        finals["random"].append(random_search(ctx, budget, seed=seed).true_curve()[-1])
    medians = {method: float(np.median(values)) for method, values in finals.items()}
    assert medians["mm"] <= medians["random"]
    assert medians["mm"] <= 1.1 * medians["sa"]


def _per_call_ns(fn, calls: int = 2000, repeats: int = 5) -> float:
    best = math.inf
    for _ in range(repeats):
        start = time.perf_counter_ns()
        for _ in range(calls):
            fn()
        best = min(best, (time.perf_counter_ns() - start) / calls)
    return best


@pytest.mark.xfail(strict=False, reason="the analytical cost model is itself a few dozen microseconds of Python")
def test_surrogate_step_is_cheaper_than_the_cost_model(desk):
    problem = problem_presets(AlgorithmKind.CONV)["conv-desk"]
    ctx = MapSpaceCtx(problem, desk)
    m = get_mapping(ctx, 0)
    model = surrogate.build_model(AlgorithmKind.CONV, surrogate.TOPOLOGY_PRESETS["desk"], seed=0)
    x = encode(ctx, m)
    w = np.ones(model.widths[-1])
    step = _per_call_ns(lambda: surrogate.input_gradient(model, x, w))
    cost = _per_call_ns(lambda: evaluate(desk, problem, m))
    assert cost >= 10 * step
