"""Experiment jobs behind the CLI subcommands.

Each job reads an ExperimentConfig, writes its outputs under output_dir and
returns what it wrote. Search runs fan out over a thread pool; results are
collected in task order, so files do not depend on scheduling.
"""
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from mapsearch import __version__
from mapsearch.config import ExperimentConfig
from mapsearch.errors import ConfigError
from mapsearch.models import LEVELS, Problem
from mapsearch.services import dataset as ds
from mapsearch.services import surrogate
from mapsearch.services.costmodel import algorithmic_minimum, evaluate
from mapsearch.services.mapspace import (
    MapSpaceCtx,
    divisors,
    encode,
    format_mapping,
    get_mapping,
    get_projection,
    space_size,
)
from mapsearch.services.report import ComparisonReport, aggregate, write_table
from mapsearch.services.search import SearchTrace, run_method

logger = logging.getLogger(__name__)


def _out(cfg: ExperimentConfig, name: str) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    return os.path.join(cfg.output_dir, name)


def _slug(problem: Problem) -> str:
    return problem.label.replace(":", "-")


def run_seed(master: int, method: int, problem: int, run: int) -> int:
    return int(np.random.SeedSequence([master, method, problem, run]).generate_state(1)[0])


def gen_dataset(cfg: ExperimentConfig, overwrite: bool = False) -> str:
    os.makedirs(os.path.dirname(cfg.dataset_path) or ".", exist_ok=True)
    return ds.generate(cfg.accel, cfg.kind, cfg.dataset_range, cfg.dataset_size, cfg.seed,
                       cfg.dataset_path, test_fraction=cfg.test_fraction, workers=cfg.workers,
                       overwrite=overwrite)


def _fit(cfg: ExperimentConfig, data: ds.Dataset, loss: str) -> surrogate.TrainResult:
    stats = ds.fit_norm(data, cfg.accel)
    model = surrogate.build_model(cfg.kind, cfg.hidden, cfg.activation, cfg.seed, stats)
    return surrogate.train(model, data, replace(cfg.train, loss=loss))


def train_model(cfg: ExperimentConfig) -> Tuple[str, str]:
    """Train the surrogate on the configured dataset; returns (model path, loss-curve path)."""
    data = ds.load(cfg.dataset_path)
    if data.kind is not cfg.kind:
        raise ConfigError(f"{cfg.dataset_path} holds {data.kind.value} records but kind = {cfg.kind.value}")
    result = _fit(cfg, data, cfg.train.loss)
    os.makedirs(os.path.dirname(cfg.model_path) or ".", exist_ok=True)
    surrogate.save(result.model, cfg.model_path)
    rho = surrogate.rank_quality(result.model, data)
    logger.info(f"Held-out Spearman rank correlation of predicted EDP: {rho:.4f}")
    curve = write_table(_out(cfg, f"loss-{cfg.kind.value}.csv"), result.curve, cfg.header(__version__))
    return cfg.model_path, curve


def _traces(cfg: ExperimentConfig) -> List[SearchTrace]:
    model = surrogate.load(cfg.model_path) if "mm" in cfg.methods else None
    tasks = []
    for pi, problem in enumerate(cfg.problems):
        ctx = MapSpaceCtx(problem, cfg.accel)
        for mi, method in enumerate(cfg.methods):
            for r in range(cfg.runs):
                tasks.append((method, ctx, run_seed(cfg.seed, mi, pi, r)))
    logger.info(f"Running {len(tasks)} searches on {cfg.workers} worker(s)...")

    def one(task):
        method, ctx, seed = task
        return run_method(method, ctx, cfg.budget, seed, model, cfg.mm, cfg.sa, cfg.ga)

    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        return list(executor.map(one, tasks))


def run_search(cfg: ExperimentConfig, timing: bool = True) -> List[str]:
    """Trace CSV per (problem, method) plus the best mapping found over all runs."""
    traces = _traces(cfg)
    return _write_traces(cfg, traces, timing)


def _write_traces(cfg: ExperimentConfig, traces: List[SearchTrace], timing: bool) -> List[str]:
    by_key: Dict[Tuple[str, str], List[SearchTrace]] = {}
    for trace in traces:
        by_key.setdefault((_slug(trace.ctx.problem), trace.method), []).append(trace)
    paths = []
    for (slug, method), group in by_key.items():
        frame = pd.concat([t.to_frame(timing) for t in group], ignore_index=True)
        paths.append(write_table(_out(cfg, f"trace-{slug}-{method}.csv"), frame, cfg.header(__version__)))
        best = min(group, key=lambda t: t.best_true_obj)
        path = _out(cfg, f"best-{slug}-{method}.txt")
        with open(path, "w") as f:
            f.write(format_mapping(best.ctx.problem, best.best))
            f.write(f"# edp={best.best_cost.edp!r} normalized={best.best_true_obj!r} seed={best.seed}\n")
        paths.append(path)
    return paths


def compare(cfg: ExperimentConfig, timing: bool = True) -> Tuple[ComparisonReport, List[str]]:
    traces = _traces(cfg)
    paths = _write_traces(cfg, traces, timing)
    report = aggregate(traces, allow_ragged=cfg.budget.seconds is not None,
                       time_points=16 if timing else 0)
    header = cfg.header(__version__)
    paths.append(write_table(_out(cfg, "report-iterations.csv"), report.iterations, header))
    if timing:
        paths.append(write_table(_out(cfg, "report-time.csv"), report.times, header))
    paths.append(write_table(_out(cfg, "report-ratios.csv"), report.ratios, header))
    return report, paths


def _parse_axis(kind, text: str) -> Tuple[int, int]:
    level, _, dim = text.partition(".")
    if level not in LEVELS[1:] or dim not in kind.dims:
        raise ConfigError(f"Surface axis must be L2.<dim> or L1.<dim> with dim in {kind.dims}, got {text!r}")
    return LEVELS.index(level), kind.dims.index(dim)


def _with_tile(ctx: MapSpaceCtx, v: np.ndarray, level: int, d: int, size: int) -> None:
    """Rewrite the factor entries of dim d so that its tile at `level` is `size`."""
    layout = ctx.layout
    bound = ctx.bounds[d]
    l2 = bound / v[layout.factor_index(0, d)]
    l1 = l2 / v[layout.factor_index(1, d)]
    par = v[layout.par_index(d)]
    if level == 1:
        l2 = size
        l1 = math.gcd(int(round(l1)), l2)
    else:
        l1 = size
    par = math.gcd(int(round(par)), int(l1))
    v[layout.factor_index(0, d)] = bound / l2
    v[layout.factor_index(1, d)] = l2 / l1
    v[layout.factor_index(2, d)] = l1 / par
    v[layout.par_index(d)] = par


def cost_surface(cfg: ExperimentConfig) -> pd.DataFrame:
    """EDP over every divisor pair of two tile axes, other attributes held at a
    random base mapping; points that do not fit are repaired by projection."""
    if not cfg.surface_x or not cfg.surface_y:
        raise ConfigError("surface.x and surface.y must name tile axes such as L2.W")
    problem = cfg.problems[0]
    ctx = MapSpaceCtx(problem, cfg.accel)
    ax, ay = _parse_axis(cfg.kind, cfg.surface_x), _parse_axis(cfg.kind, cfg.surface_y)
    if ax == ay:
        raise ConfigError("surface.x and surface.y must differ")
    base = get_mapping(ctx, cfg.surface_seed)
    rows = []
    for x in divisors(ctx.bounds[ax[1]]):
        for y in divisors(ctx.bounds[ay[1]]):
            v = encode(ctx, base)
            _with_tile(ctx, v, ax[0], ax[1], x)
            _with_tile(ctx, v, ay[0], ay[1], y)
            m = get_projection(ctx, v)
            rows.append([x, y, evaluate(cfg.accel, problem, m).edp])
    return pd.DataFrame(rows, columns=["x", "y", "edp"])


def surface(cfg: ExperimentConfig) -> str:
    df = cost_surface(cfg)
    return write_table(_out(cfg, f"surface-{_slug(cfg.problems[0])}.csv"), df, cfg.header(__version__))


def lower_bounds(cfg: ExperimentConfig) -> pd.DataFrame:
    rows = []
    for problem in cfg.problems:
        bound = algorithmic_minimum(cfg.accel, problem)
        rows.append([problem.label, bound.energy_total, bound.cycles, bound.utilization, bound.edp])
    return pd.DataFrame(rows, columns=["problem", "energy_total", "cycles", "utilization", "edp"])


def characterize(cfg: ExperimentConfig) -> str:
    rows = []
    for i, problem in enumerate(cfg.problems):
        stats = ds.characterize(cfg.accel, problem, cfg.characterize_samples, run_seed(cfg.seed, 0, i, 0))
        size = space_size(MapSpaceCtx(problem, cfg.accel))
        rows.append(dict(problem=problem.label, log10_space=size.log10, exact=size.exact,
                         placements=size.placements, **stats))
    df = pd.DataFrame(rows)
    return write_table(_out(cfg, f"characterize-{cfg.kind.value}.csv"), df, cfg.header(__version__))


def loss_compare(cfg: ExperimentConfig) -> pd.DataFrame:
    """Same topology, data and seed trained under each loss."""
    data = ds.load(cfg.dataset_path)
    rows = []
    for loss in surrogate.LOSSES:
        result = _fit(cfg, data, loss)
        last = result.curve.iloc[-1]
        rows.append([loss, float(last["train_loss"]), float(last["test_loss"]),
                     surrogate.rank_quality(result.model, data)])
    df = pd.DataFrame(rows, columns=["loss", "train_loss", "test_loss", "spearman"])
    write_table(_out(cfg, f"loss-compare-{cfg.kind.value}.csv"), df, cfg.header(__version__))
    return df
