"""Training-set generation and the input/output normalization pipeline.

A dataset file is a `#` header block followed by a CSV table with one row per
sampled mapping: the split tag, the raw flat mapping vector (problem dims
first) and the raw cost vector.
"""
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mapsearch.errors import DatasetExistsError, FingerprintMismatchError, InvalidProblemError, SchemaError
from mapsearch.models import LEVELS, AcceleratorConfig, AlgorithmKind, CostVector, Problem, cost_columns
from mapsearch.services.costmodel import algorithmic_minimum, evaluate
from mapsearch.services.mapspace import MapSpaceCtx, encode, get_mapping, vector_layout

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "mapsearch-dataset v1"
EPS = 1e-8

_DEFAULT_RANGES = {
    AlgorithmKind.CONV1D: {"W": (8, 64), "R": (2, 8)},
    AlgorithmKind.CONV: {"N": (1, 32), "K": (32, 512), "C": (32, 512), "H": (7, 112),
                         "W": (7, 112), "R": (1, 5), "S": (1, 5)},
    AlgorithmKind.MTTKRP: {"I": (32, 4096), "J": (32, 4096), "K": (32, 4096), "L": (32, 4096)},
}


@dataclass(frozen=True)
class ProblemRange:
    kind: AlgorithmKind
    intervals: Tuple[Tuple[int, int], ...]  # per dim, inclusive

    @classmethod
    def default(cls, kind: AlgorithmKind, **overrides: Tuple[int, int]) -> "ProblemRange":
        ranges = dict(_DEFAULT_RANGES[kind])
        for name, interval in overrides.items():
            if name not in ranges:
                raise InvalidProblemError(f"{kind.value} has no dim {name}")
            ranges[name] = tuple(interval)
        return cls(kind, tuple(ranges[name] for name in kind.dims))

    def __post_init__(self):
        if len(self.intervals) != len(self.kind.dims):
            raise InvalidProblemError(f"Need one interval per dim of {self.kind.value}")
        for name, (lo, hi) in zip(self.kind.dims, self.intervals):
            if lo < 1 or hi < lo:
                raise InvalidProblemError(f"Empty or non-positive range for {name}: [{lo}, {hi}]")
        names = self.kind.dims
        if self.kind is not AlgorithmKind.MTTKRP:
            if self.intervals[names.index("R")][0] > self.intervals[names.index("W")][1]:
                raise InvalidProblemError("Range is unsatisfiable: smallest R exceeds largest W")
            if self.kind is AlgorithmKind.CONV and \
                    self.intervals[names.index("S")][0] > self.intervals[names.index("H")][1]:
                raise InvalidProblemError("Range is unsatisfiable: smallest S exceeds largest H")

    def sample(self, rng: np.random.Generator) -> Problem:
        """Per-dim independent draws, log-uniform for ranges spanning 8x or more;
        draws violating R <= W (S <= H) are redrawn."""
        while True:
            dims = []
            for lo, hi in self.intervals:
                if hi >= 8 * lo:
                    value = int(math.floor(math.exp(rng.uniform(math.log(lo), math.log(hi + 1)))))
                    dims.append(min(max(value, lo), hi))
                else:
                    dims.append(int(rng.integers(lo, hi + 1)))
            try:
                return Problem(self.kind, tuple(dims))
            except InvalidProblemError:
                continue


@dataclass
class Dataset:
    kind: AlgorithmKind
    header: Dict[str, str]
    split: np.ndarray  # "train" / "test"
    x: np.ndarray  # raw flat mapping vectors, problem dims first
    y: np.ndarray  # raw cost vectors

    def __len__(self) -> int:
        return len(self.split)

    @property
    def n_pid(self) -> int:
        return len(self.kind.dims)

    def pids(self) -> List[Tuple[int, ...]]:
        return [tuple(int(v) for v in row) for row in self.x[:, :self.n_pid]]

    def subset(self, name: str) -> "Dataset":
        mask = self.split == name
        return Dataset(self.kind, dict(self.header), self.split[mask], self.x[mask], self.y[mask])

    def train_fingerprint(self) -> str:
        train = self.subset("train")
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(train.x).tobytes())
        h.update(np.ascontiguousarray(train.y).tobytes())
        return h.hexdigest()[:16]


def _columns(kind: AlgorithmKind) -> List[str]:
    return ["split"] + [f"v{i}" for i in range(vector_layout(kind).length)] + list(cost_columns(kind))


def _sample_record(accel, kind, problem_range, seed, index, test_fraction):
    rng = np.random.default_rng([seed, index])
    problem = problem_range.sample(rng)
    ctx = MapSpaceCtx(problem, accel)
    mapping = get_mapping(ctx, rng)
    cost = evaluate(accel, problem, mapping)
    split = "test" if rng.random() < test_fraction else "train"
    return [split] + list(encode(ctx, mapping)) + list(cost.as_array())


class DatasetWriter:
    """Single appender for a dataset file; writes the header once."""

    def __init__(self, path: str, kind: AlgorithmKind, meta: Dict[str, str]):
        self.path = path
        self.kind = kind
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", newline="") as f:
                f.write(f"# {SCHEMA_VERSION}\n")
                f.write(f"# kind={kind.value}\n")
                for key, value in meta.items():
                    f.write(f"# {key}={value}\n")
                f.write(",".join(_columns(kind)) + "\n")
        else:
            header = read_header(path)
            if header.get("kind") != kind.value:
                raise SchemaError(f"{path} holds {header.get('kind')} records, not {kind.value}")

    def append(self, rows: Sequence[list]) -> None:
        df = pd.DataFrame(list(rows), columns=_columns(self.kind))
        df.to_csv(self.path, mode="a", header=False, index=False, float_format="%.17g")


def generate(accel: AcceleratorConfig, kind: AlgorithmKind, problem_range: ProblemRange, n: int,
             seed: int, path: str, test_fraction: float = 0.1, workers: int = 1,
             chunk: int = 5000, overwrite: bool = False) -> str:
    """Write a fresh dataset file. An existing file at `path` is left alone
    unless `overwrite` is set, in which case it is replaced."""
    if n < 1:
        raise SchemaError("Dataset size must be at least 1")
    if os.path.exists(path):
        if not overwrite:
            raise DatasetExistsError(f"{path} already exists; pass overwrite to replace it")
        logger.warning(f"Replacing existing dataset {path}")
        os.remove(path)
    meta = {"accel": accel.fingerprint(), "seed": str(seed), "records": str(n),
            "test_fraction": repr(test_fraction),
            "range": ";".join(f"{name}={lo}:{hi}" for name, (lo, hi) in zip(kind.dims, problem_range.intervals))}
    writer = DatasetWriter(path, kind, meta)
    logger.info(f"Generating {n} {kind.value} records into {path}...")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for start in range(0, n, chunk):
            indices = range(start, min(n, start + chunk))
            # map() preserves index order, so the file does not depend on scheduling
            rows = list(executor.map(
                lambda i: _sample_record(accel, kind, problem_range, seed, i, test_fraction), indices))
            writer.append(rows)
            logger.debug(f"Wrote records {start}..{indices[-1]}")
    logger.info(f"Saved {n} records to {path}")
    return path


def read_header(path: str) -> Dict[str, str]:
    header = {}
    with open(path) as f:
        first = f.readline().strip()
        if first != f"# {SCHEMA_VERSION}":
            raise SchemaError(f"{path} is not a {SCHEMA_VERSION} file")
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            header[key] = value
    return header


def load(path: str) -> Dataset:
    header = read_header(path)
    kind = AlgorithmKind.parse(header.get("kind", ""))
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    if list(df.columns) != _columns(kind):
        raise SchemaError(f"{path} columns do not match the {kind.value} schema")
    width = vector_layout(kind).length
    values = df.iloc[:, 1:].to_numpy(dtype=float)
    return Dataset(kind, header, df["split"].to_numpy(dtype=str), values[:, :width], values[:, width:])


def lower_bound_divisors(accel: AcceleratorConfig, kind: AlgorithmKind, pid: Sequence[int]) -> np.ndarray:
    """Energy components scale by the bound energy, cycles by the bound cycles;
    utilization is already dimensionless."""
    bound = algorithmic_minimum(accel, Problem(kind, tuple(int(v) for v in pid)))
    n_energy = len(LEVELS) * len(kind.tensors) + 1
    return np.array([bound.energy_total] * n_energy + [1.0, bound.cycles])


def _divisor_matrix(accel, kind, pids) -> np.ndarray:
    return np.stack([lower_bound_divisors(accel, kind, pid) for pid in pids])


@dataclass
class NormStats:
    kind: AlgorithmKind
    accel: AcceleratorConfig
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray
    fingerprint: str = field(default="")

    def normalize_input(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.in_mean) / self.in_std

    def denormalize_input(self, xn: np.ndarray) -> np.ndarray:
        return np.asarray(xn, dtype=float) * self.in_std + self.in_mean


def fit_norm(dataset: Dataset, accel: AcceleratorConfig) -> NormStats:
    """Statistics of the training split only."""
    train = dataset.subset("train")
    if len(train) == 0:
        raise SchemaError("Cannot fit normalization on an empty training split")
    scaled = train.y / _divisor_matrix(accel, dataset.kind, train.pids())
    return NormStats(
        kind=dataset.kind,
        accel=accel,
        in_mean=train.x.mean(axis=0),
        in_std=np.maximum(train.x.std(axis=0), EPS),
        out_mean=scaled.mean(axis=0),
        out_std=np.maximum(scaled.std(axis=0), EPS),
        fingerprint=dataset.train_fingerprint(),
    )


def apply_norm(stats: NormStats, x: np.ndarray, y: Optional[np.ndarray] = None):
    """Normalize raw mapping vectors (and raw cost vectors, when given)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(stats.in_mean):
        raise SchemaError(f"Expected mapping vectors of length {len(stats.in_mean)}, got {x.shape[-1]}")
    xn = stats.normalize_input(x)
    if y is None:
        return xn, None
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != len(stats.out_mean):
        raise SchemaError(f"Expected cost vectors of length {len(stats.out_mean)}, got {y.shape[-1]}")
    pids = np.atleast_2d(x)[:, :len(stats.kind.dims)]
    div = _divisor_matrix(stats.accel, stats.kind, pids).reshape(y.shape)
    return xn, (y / div - stats.out_mean) / stats.out_std


def normalize_dataset(stats: NormStats, dataset: Dataset):
    """Normalized (x, y) of a whole dataset; refuses data the stats were not fit on."""
    if dataset.train_fingerprint() != stats.fingerprint:
        raise FingerprintMismatchError("Normalization statistics were fit on a different training split")
    return apply_norm(stats, dataset.x, dataset.y)


def invert_norm(stats: NormStats, yn: np.ndarray, pid: Sequence[int]) -> CostVector:
    yn = np.asarray(yn, dtype=float)
    if yn.shape != stats.out_mean.shape:
        raise SchemaError(f"Expected a normalized cost vector of length {len(stats.out_mean)}")
    raw = (yn * stats.out_std + stats.out_mean) * lower_bound_divisors(stats.accel, stats.kind, pid)
    return CostVector.from_array(stats.kind, raw, stats.accel.clock_hz)


def characterize(accel: AcceleratorConfig, problem: Problem, n: int, seed: int) -> Dict[str, float]:
    """Energy of uniformly sampled mappings relative to the algorithmic minimum."""
    ctx = MapSpaceCtx(problem, accel)
    rng = np.random.default_rng(seed)
    floor = algorithmic_minimum(accel, problem).energy_total
    ratios = np.array([evaluate(accel, problem, get_mapping(ctx, rng)).energy_total / floor
                       for _ in range(n)])
    return {"samples": n, "mean": float(ratios.mean()), "std": float(ratios.std()),
            "min": float(ratios.min()), "max": float(ratios.max())}
