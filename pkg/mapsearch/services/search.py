"""Searchers over a map space behind one interface.

`gradient_search` descends the surrogate's predicted EDP in normalized vector
space and projects back onto the space after every step; it never queries the
cost model until the final best is re-evaluated. The baselines (simulated
annealing, a genetic algorithm, random sampling) rank candidates by the true
cost model, one evaluation per iteration.

Every searcher returns a SearchTrace: one row per iteration plus the list of
candidates it refers to.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np
import pandas as pd

from mapsearch.errors import ConfigError
from mapsearch.models import EDP, CostVector, Mapping, Objective
from mapsearch.services.costmodel import evaluate, normalized_objective
from mapsearch.services.mapspace import (
    MapSpaceCtx,
    encode,
    get_mapping,
    get_projection,
    neighbor,
    space_size,
)
from mapsearch.services.surrogate import MlpModel, check_compatible, edp_objective

logger = logging.getLogger(__name__)

METHODS = ("mm", "sa", "ga", "random")
TRACE_COLUMNS = ["run_seed", "method", "iteration", "elapsed_ns", "predicted_obj",
                 "true_obj_if_known", "best_true_obj_final"]


@dataclass(frozen=True)
class SearchBudget:
    """Exactly one of an iteration count or a wall-clock limit."""
    iterations: Optional[int] = None
    seconds: Optional[float] = None

    def __post_init__(self):
        if (self.iterations is None) == (self.seconds is None):
            raise ConfigError("Set exactly one of budget.iterations and budget.seconds")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError("budget.iterations must be >= 1")
        if self.seconds is not None and not self.seconds > 0:
            raise ConfigError("budget.seconds must be > 0")

    def exhausted(self, done: int, started_ns: int) -> bool:
        if self.iterations is not None:
            return done >= self.iterations
        return time.perf_counter_ns() - started_ns >= self.seconds * 1e9


@dataclass(frozen=True)
class GradSearchConfig:
    alpha: float = 1.0
    inject_every: int = 10
    t0: float = 50.0
    anneal_factor: float = 0.75
    anneal_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("mm.alpha must be >= 0")
        if self.inject_every < 1 or self.anneal_every < 1:
            raise ConfigError("mm.inject_every and mm.anneal_every must be >= 1")
        if not self.t0 > 0:
            raise ConfigError("mm.t0 must be > 0")
        if not 0 < self.anneal_factor < 1:
            raise ConfigError("mm.anneal_factor must be in (0, 1)")


@dataclass(frozen=True)
class SaConfig:
    t0: Optional[float] = None  # None: tune from a short pre-pass
    cooling: float = 0.995
    autotune_samples: int = 20
    target_acceptance: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.t0 is not None and not self.t0 > 0:
            raise ConfigError("sa.t0 must be > 0")
        if not 0 < self.cooling <= 1:
            raise ConfigError("sa.cooling must be in (0, 1]")
        if not 0 < self.target_acceptance < 1:
            raise ConfigError("sa target acceptance must be in (0, 1)")
        if self.autotune_samples < 1:
            raise ConfigError("sa autotune samples must be >= 1")


@dataclass(frozen=True)
class GaConfig:
    population: int = 100
    crossover: float = 0.75
    mutation: float = 0.05
    elitism: int = 1
    tournament: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ConfigError("ga.population must be >= 2")
        for name in ("crossover", "mutation"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"ga.{name} must be a probability")
        if self.elitism < 0 or self.tournament < 1:
            raise ConfigError("ga.elitism must be >= 0 and ga.tournament >= 1")


@dataclass
class TraceRow:
    iteration: int
    elapsed_ns: int
    candidate_id: int
    predicted_obj: float
    true_obj: float
    best: float  # best-so-far under the searcher's own ranking objective


@dataclass
class SearchTrace:
    method: str
    seed: int
    ctx: MapSpaceCtx
    rows: List[TraceRow] = field(default_factory=list)
    candidates: List[Mapping] = field(default_factory=list, repr=False)
    best_id: int = -1
    best_cost: Optional[CostVector] = None
    best_true_obj: float = float("nan")

    @property
    def best(self) -> Mapping:
        return self.candidates[self.best_id]

    def record(self, started_ns: int, mapping: Mapping, predicted: float, true: float, best: float) -> int:
        cid = len(self.candidates)
        self.candidates.append(mapping)
        self.rows.append(TraceRow(len(self.rows), time.perf_counter_ns() - started_ns, cid,
                                  predicted, true, best))
        return cid

    def finish(self, obj: Objective) -> "SearchTrace":
        accel, problem = self.ctx.accel, self.ctx.problem
        self.best_cost = evaluate(accel, problem, self.best)
        self.best_true_obj = normalized_objective(accel, problem, self.best_cost, obj)
        logger.info(f"{self.method} (seed {self.seed}) on {problem.label}: "
                    f"best normalized objective {self.best_true_obj:.4g} after {len(self.rows)} iterations")
        return self

    def true_curve(self, obj: Objective = EDP) -> np.ndarray:
        """Best-so-far true normalized objective after every row; candidates without
        a recorded true cost are re-evaluated here."""
        accel, problem = self.ctx.accel, self.ctx.problem
        cache = {}
        best = math.inf
        out = np.empty(len(self.rows))
        for i, row in enumerate(self.rows):
            value = row.true_obj
            if math.isnan(value):
                if row.candidate_id not in cache:
                    cv = evaluate(accel, problem, self.candidates[row.candidate_id])
                    cache[row.candidate_id] = normalized_objective(accel, problem, cv, obj)
                value = cache[row.candidate_id]
            best = min(best, value)
            out[i] = best
        return out

    def to_frame(self, timing: bool = True) -> pd.DataFrame:
        return pd.DataFrame(
            [[self.seed, self.method, r.iteration, r.elapsed_ns if timing else 0, r.predicted_obj,
              r.true_obj, self.best_true_obj] for r in self.rows],
            columns=TRACE_COLUMNS)


def accept(candidate_cost: float, incumbent_cost: float, temperature: float, rng: np.random.Generator) -> bool:
    """Metropolis rule."""
    if not temperature > 0:
        raise ConfigError("Acceptance temperature must be > 0")
    if candidate_cost <= incumbent_cost:
        return True
    return bool(rng.random() < math.exp(-(candidate_cost - incumbent_cost) / temperature))


def gradient_search(ctx: MapSpaceCtx, model: MlpModel, cfg: GradSearchConfig = GradSearchConfig(),
                    budget: SearchBudget = SearchBudget(iterations=500)) -> SearchTrace:
    """Projected gradient descent on the surrogate with annealed random injections."""
    check_compatible(model, ctx)
    stats = model.norm
    rng = np.random.default_rng(cfg.seed)
    trace = SearchTrace("mm", cfg.seed, ctx)
    started = time.perf_counter_ns()

    def surrogate(m: Mapping):
        x = stats.normalize_input(encode(ctx, m))
        value, grad = edp_objective(model, x)
        return x, value, grad

    current = get_mapping(ctx, rng)
    x, cost, grad = surrogate(current)
    best = cost
    trace.best_id = trace.record(started, current, cost, math.nan, best)
    temperature = cfg.t0
    injections = 0
    while not budget.exhausted(len(trace.rows), started):
        if len(trace.rows) % cfg.inject_every == 0:
            candidate = get_mapping(ctx, rng)
            cx, ccost, cgrad = surrogate(candidate)
            if accept(ccost, cost, temperature, rng):
                logger.debug(f"Injection {injections} accepted at T={temperature:g}")
                current, x, cost, grad = candidate, cx, ccost, cgrad
            injections += 1
            if injections % cfg.anneal_every == 0:
                temperature *= cfg.anneal_factor
            evaluated, value = candidate, ccost
        else:
            step = x - cfg.alpha * grad
            current = get_projection(ctx, stats.denormalize_input(step))
            x, cost, grad = surrogate(current)
            evaluated, value = current, cost
        cid = trace.record(started, evaluated, value, math.nan, min(best, value))
        if value < best:
            best, trace.best_id = value, cid
    return trace.finish(EDP)


def _true_objective(ctx: MapSpaceCtx, obj: Objective) -> Callable[[Mapping], float]:
    def f(m: Mapping) -> float:
        return normalized_objective(ctx.accel, ctx.problem, evaluate(ctx.accel, ctx.problem, m), obj)
    return f


def _tune_temperature(deltas: List[float], target: float) -> float:
    """Temperature at which the mean uphill move is accepted with probability `target`."""
    uphill = [d for d in deltas if d > 0]
    if not uphill:
        return 1.0
    return -float(np.mean(uphill)) / math.log(target)


def simulated_annealing(ctx: MapSpaceCtx, cfg: SaConfig = SaConfig(),
                        budget: SearchBudget = SearchBudget(iterations=500), obj: Objective = EDP) -> SearchTrace:
    f = _true_objective(ctx, obj)
    rng = np.random.default_rng(cfg.seed)
    trace = SearchTrace("sa", cfg.seed, ctx)
    started = time.perf_counter_ns()

    current = get_mapping(ctx, rng)
    cost = f(current)
    best = cost
    trace.best_id = trace.record(started, current, math.nan, cost, best)

    temperature = cfg.t0
    if temperature is None:
        # neighbors of the start point, each one a counted iteration
        deltas = []
        while len(deltas) < cfg.autotune_samples and not budget.exhausted(len(trace.rows), started):
            sample = neighbor(ctx, current, rng)
            value = f(sample)
            deltas.append(value - cost)
            cid = trace.record(started, sample, math.nan, value, min(best, value))
            if value < best:
                best, trace.best_id = value, cid
        temperature = _tune_temperature(deltas, cfg.target_acceptance)
        logger.debug(f"Tuned initial temperature to {temperature:g}")

    while not budget.exhausted(len(trace.rows), started):
        candidate = neighbor(ctx, current, rng)
        value = f(candidate)
        if accept(value, cost, temperature, rng):
            current, cost = candidate, value
        cid = trace.record(started, candidate, math.nan, value, min(best, value))
        if value < best:
            best, trace.best_id = value, cid
        temperature = max(temperature * cfg.cooling, 1e-300)
    return trace.finish(obj)


def _population_cap(ctx: MapSpaceCtx, population: int) -> int:
    size = space_size(ctx, cap=10 ** 4)
    if size.exact and size.count < population:
        return max(2, size.count)
    return population


def genetic_search(ctx: MapSpaceCtx, cfg: GaConfig = GaConfig(),
                   budget: SearchBudget = SearchBudget(iterations=500), obj: Objective = EDP) -> SearchTrace:
    """Tournament selection, uniform crossover over attribute groups, per-group
    resampling mutation and elitism; children are projected onto the space."""
    f = _true_objective(ctx, obj)
    rng = np.random.default_rng(cfg.seed)
    trace = SearchTrace("ga", cfg.seed, ctx)
    started = time.perf_counter_ns()
    groups = [idx for _, idx in ctx.layout.groups()]
    pop_size = _population_cap(ctx, cfg.population)
    best = math.inf

    def add(m: Mapping):
        nonlocal best
        value = f(m)
        cid = trace.record(started, m, math.nan, value, min(best, value))
        if value < best:
            best, trace.best_id = value, cid
        return cid, value

    population = []  # (fitness, candidate id, mapping)
    while len(population) < pop_size and not budget.exhausted(len(trace.rows), started):
        m = get_mapping(ctx, rng)
        cid, value = add(m)
        population.append((value, cid, m))

    def tournament():
        picks = rng.choice(len(population), size=min(cfg.tournament, len(population)), replace=False)
        return min((population[i] for i in picks), key=lambda p: (p[0], p[1]))[2]

    if cfg.elitism >= pop_size:
        logger.info("Elitism keeps the whole population; nothing left to evolve")
        return trace.finish(obj)

    generation = 0
    while not budget.exhausted(len(trace.rows), started):
        ranked = sorted(population, key=lambda p: (p[0], p[1]))
        children = ranked[:cfg.elitism]
        while len(children) < pop_size and not budget.exhausted(len(trace.rows), started):
            a, b = encode(ctx, tournament()), encode(ctx, tournament())
            if rng.random() < cfg.crossover:
                for idx in groups:
                    if rng.random() < 0.5:
                        a[idx], b[idx] = b[idx].copy(), a[idx].copy()
            for v in (a, b):
                if len(children) >= pop_size or budget.exhausted(len(trace.rows), started):
                    break
                for idx in groups:
                    if rng.random() < cfg.mutation:
                        v[idx] = encode(ctx, get_mapping(ctx, rng))[idx]
                child = get_projection(ctx, v)
                cid, value = add(child)
                children.append((value, cid, child))
        population = children
        generation += 1
        logger.debug(f"Generation {generation}: best {best:.4g}")
    return trace.finish(obj)


def random_search(ctx: MapSpaceCtx, budget: SearchBudget = SearchBudget(iterations=500), seed: int = 0,
                  obj: Objective = EDP) -> SearchTrace:
    f = _true_objective(ctx, obj)
    rng = np.random.default_rng(seed)
    trace = SearchTrace("random", seed, ctx)
    started = time.perf_counter_ns()
    best = math.inf
    while not budget.exhausted(len(trace.rows), started):
        m = get_mapping(ctx, rng)
        value = f(m)
        cid = trace.record(started, m, math.nan, value, min(best, value))
        if value < best:
            best, trace.best_id = value, cid
    return trace.finish(obj)


def run_method(method: str, ctx: MapSpaceCtx, budget: SearchBudget, seed: int,
               model: Optional[MlpModel] = None, mm: GradSearchConfig = GradSearchConfig(),
               sa: SaConfig = SaConfig(), ga: GaConfig = GaConfig()) -> SearchTrace:
    """Dispatch by method name with the run seed substituted into its config."""
    if method == "mm":
        if model is None:
            raise ConfigError("Method mm needs a trained model (model.path)")
        return gradient_search(ctx, model, replace(mm, seed=seed), budget)
    if method == "sa":
        return simulated_annealing(ctx, replace(sa, seed=seed), budget)
    if method == "ga":
        return genetic_search(ctx, replace(ga, seed=seed), budget)
    if method == "random":
        return random_search(ctx, budget, seed)
    raise ConfigError(f"Unknown search method {method!r}; choose from {METHODS}")
