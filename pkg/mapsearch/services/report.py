"""Aggregation of search traces into iso-iteration and iso-time comparisons."""
import logging
import math
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List, Mapping, Sequence

import numpy as np
import pandas as pd

from mapsearch.errors import RaggedTraceError
from mapsearch.services.search import SearchTrace

logger = logging.getLogger(__name__)


def iteration_checkpoints(n: int) -> List[int]:
    """Powers of two up to n, plus n itself."""
    points = []
    k = 1
    while k <= n:
        points.append(k)
        k *= 2
    if points and points[-1] != n:
        points.append(n)
    return points


def time_checkpoints(first_ns: float, last_ns: float, count: int = 16) -> List[int]:
    if last_ns <= 0:
        return []
    first_ns = max(first_ns, 1.0)
    if last_ns <= first_ns:
        return [int(last_ns)]
    return sorted({int(round(t)) for t in np.geomspace(first_ns, last_ns, count)})


def best_at_time(trace: SearchTrace, curve: np.ndarray, t_ns: int) -> float:
    """Best-so-far value among the rows finished by t_ns (nan before the first)."""
    elapsed = np.array([r.elapsed_ns for r in trace.rows])
    k = int(np.searchsorted(elapsed, t_ns, side="right"))
    return float(curve[k - 1]) if k else float("nan")


@dataclass
class ComparisonReport:
    iterations: pd.DataFrame  # problem, method, checkpoint, runs, mean_norm_edp
    times: pd.DataFrame  # problem, method, checkpoint_ns, runs, mean_norm_edp
    ratios: pd.DataFrame  # method_a, method_b, problems, geomean_ratio, mean_ratio

    def final(self) -> pd.DataFrame:
        """Mean best normalized EDP at the last iteration checkpoint per problem and method."""
        last = self.iterations.groupby(["problem", "method"], sort=False)["checkpoint"].transform("max")
        return self.iterations[self.iterations["checkpoint"] == last].reset_index(drop=True)


def aggregate(traces: Sequence[SearchTrace], allow_ragged: bool = False, time_points: int = 16) -> ComparisonReport:
    """Arithmetic mean over runs of the best-so-far true normalized EDP.

    Traces are grouped by (problem, method) and folded in the order given.
    Iteration-budgeted traces of one group must share a length; with
    allow_ragged the iteration table is cut to the shortest trace instead.
    """
    groups: Dict[tuple, List[SearchTrace]] = {}
    for trace in traces:
        groups.setdefault((trace.ctx.problem.label, trace.method), []).append(trace)

    iter_rows, time_rows = [], []
    for (problem, method), members in groups.items():
        curves = [t.true_curve() for t in members]
        lengths = {len(c) for c in curves}
        if len(lengths) > 1 and not allow_ragged:
            raise RaggedTraceError(f"{method} traces on {problem} have different lengths {sorted(lengths)}")
        n = min(lengths)
        stacked = np.stack([c[:n] for c in curves])
        for k in iteration_checkpoints(n):
            iter_rows.append([problem, method, k, len(members), float(stacked[:, k - 1].mean())])

        last = max(t.rows[-1].elapsed_ns for t in members)
        first = min(t.rows[0].elapsed_ns for t in members)
        for t_ns in time_checkpoints(first, last, time_points):
            values = [best_at_time(t, c, t_ns) for t, c in zip(members, curves)]
            values = [v for v in values if not math.isnan(v)]
            if values:
                time_rows.append([problem, method, t_ns, len(values), float(np.mean(values))])

    iterations = pd.DataFrame(iter_rows, columns=["problem", "method", "checkpoint", "runs", "mean_norm_edp"])
    times = pd.DataFrame(time_rows, columns=["problem", "method", "checkpoint_ns", "runs", "mean_norm_edp"])
    report = ComparisonReport(iterations, times, pd.DataFrame())
    report.ratios = pairwise_ratios(report.final())
    return report


def pairwise_ratios(final: pd.DataFrame) -> pd.DataFrame:
    """Ratio of method_b's to method_a's final EDP, combined over problems both as a
    geometric and an arithmetic mean (>1 means method_a found better mappings)."""
    table = final.pivot(index="problem", columns="method", values="mean_norm_edp")
    methods = list(dict.fromkeys(final["method"]))
    rows = []
    for a, b in combinations(methods, 2):
        ratio = (table[b] / table[a]).dropna()
        if ratio.empty:
            continue
        rows.append([a, b, len(ratio), float(np.exp(np.log(ratio).mean())), float(ratio.mean())])
    return pd.DataFrame(rows, columns=["method_a", "method_b", "problems", "geomean_ratio", "mean_ratio"])


def write_table(path: str, df: pd.DataFrame, meta: Mapping[str, object]) -> str:
    """CSV with a `# key=value` metadata header."""
    with open(path, "w", newline="") as f:
        for key, value in meta.items():
            f.write(f"# {key}={value}\n")
        df.to_csv(f, index=False, float_format="%.17g")
    logger.info(f"Saved {len(df)} rows to {path}")
    return path


def read_table(path: str) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", float_precision="round_trip")
