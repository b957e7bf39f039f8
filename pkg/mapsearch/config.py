"""Experiment configuration: strict flat `key = value` files.

Grammar: one `key = value` per line, `#` starts a comment, blank lines are
ignored. Keys are dotted (`accel.num_pes`, `dataset.range.W`); unknown or
repeated keys are errors reported with their line number.
"""
import hashlib
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, fields, replace
from typing import Dict, Iterable, Optional, Tuple

from mapsearch.errors import ConfigError, MapSearchError
from mapsearch.models import AcceleratorConfig, AlgorithmKind, Problem
from mapsearch.services.costmodel import accelerator_presets
from mapsearch.services.dataset import ProblemRange
from mapsearch.services.search import METHODS, GaConfig, GradSearchConfig, SaConfig, SearchBudget
from mapsearch.services.surrogate import ACTIVATIONS, TOPOLOGY_PRESETS, TrainConfig
from mapsearch.services.workload import parse_problem, problem_presets

logger = logging.getLogger(__name__)

DEFAULTS = OrderedDict([
    ("kind", "conv1d"),
    ("problems", ""),
    ("accel", "desk"),
    ("methods", ",".join(METHODS)),
    ("runs", "20"),
    ("seed", "0"),
    ("output_dir", "out"),
    ("workers", "1"),
    ("budget.iterations", ""),
    ("budget.seconds", ""),
    ("dataset.size", "50000"),
    ("dataset.test_fraction", "0.1"),
    ("dataset.path", ""),
    ("model.preset", "desk"),
    ("model.widths", ""),
    ("model.activation", "relu"),
    ("model.path", ""),
    ("train.epochs", "30"),
    ("train.batch_size", "128"),
    ("train.lr", "0.01"),
    ("train.lr_decay", "0.1"),
    ("train.lr_decay_every", "25"),
    ("train.momentum", "0.9"),
    ("train.loss", "huber"),
    ("train.huber_delta", "1.0"),
    ("mm.alpha", "1.0"),
    ("mm.inject_every", "10"),
    ("mm.t0", "50"),
    ("mm.anneal_factor", "0.75"),
    ("mm.anneal_every", "50"),
    ("sa.t0", "auto"),
    ("sa.cooling", "0.995"),
    ("sa.autotune", "true"),
    ("ga.population", "100"),
    ("ga.crossover", "0.75"),
    ("ga.mutation", "0.05"),
    ("ga.elitism", "1"),
    ("ga.tournament", "3"),
    ("surface.x", ""),
    ("surface.y", ""),
    ("surface.seed", "0"),
    ("characterize.samples", "1000"),
])

_ACCEL_FIELDS = tuple(f.name for f in fields(AcceleratorConfig))


def _known(key: str) -> bool:
    if key in DEFAULTS:
        return True
    if key.startswith("accel.") and key[len("accel."):] in _ACCEL_FIELDS:
        return True
    return key.startswith("dataset.range.") and len(key) > len("dataset.range.")


def parse_config_text(text: str, source: str = "<config>") -> "OrderedDict[str, str]":
    values: "OrderedDict[str, str]" = OrderedDict()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`, got {raw.strip()!r}")
        if not _known(key):
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _split(value: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in value.split(",") if part.strip())


def _convert(key: str, value: str, kind):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}")


def _bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected true or false, got {value!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: AlgorithmKind
    problems: Tuple[Problem, ...]
    accel_name: str
    accel: AcceleratorConfig
    methods: Tuple[str, ...]
    runs: int
    seed: int
    output_dir: str
    workers: int
    budget: SearchBudget
    dataset_size: int
    dataset_range: ProblemRange
    test_fraction: float
    dataset_path: str
    hidden: Tuple[int, ...]
    activation: str
    model_path: str
    train: TrainConfig
    mm: GradSearchConfig
    sa: SaConfig
    ga: GaConfig
    surface_x: str
    surface_y: str
    surface_seed: int
    characterize_samples: int
    listing: str  # canonical key=value lines of every resolved setting

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.listing.encode()).hexdigest()[:16]

    def header(self, version: str) -> Dict[str, object]:
        return OrderedDict([("tool", f"mapsearch {version}"), ("config", self.hash), ("seed", self.seed)])


def build_config(values: Dict[str, str]) -> ExperimentConfig:
    v = OrderedDict(DEFAULTS)
    v.update(values)
    try:
        kind = AlgorithmKind.parse(v["kind"])
    except MapSearchError as e:
        raise ConfigError(f"kind: {e}")

    presets = accelerator_presets()
    if v["accel"] not in presets:
        raise ConfigError(f"accel: unknown preset {v['accel']!r}; choose from {', '.join(presets)}")
    overrides = {}
    for name in _ACCEL_FIELDS:
        key = f"accel.{name}"
        if key in v:
            cast = float if name in ("clock_hz", "e_dram", "e_l2", "e_l1", "mac_energy") else int
            overrides[name] = _convert(key, v[key], cast)
    accel = replace(presets[v["accel"]], **overrides)

    names = _split(v["problems"]) or (next(iter(problem_presets(kind))),)
    try:
        problems = tuple(parse_problem(kind, name) for name in names)
    except MapSearchError as e:
        raise ConfigError(f"problems: {e}")

    methods = _split(v["methods"])
    if not methods:
        raise ConfigError("methods: at least one search method is required")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"methods: unknown method {m!r}; choose from {', '.join(METHODS)}")

    iterations, seconds = v["budget.iterations"], v["budget.seconds"]
    if not iterations and not seconds:
        iterations = "500"
    budget = SearchBudget(
        iterations=_convert("budget.iterations", iterations, int) if iterations else None,
        seconds=_convert("budget.seconds", seconds, float) if seconds else None)

    range_overrides = {}
    for key, value in v.items():
        if key.startswith("dataset.range."):
            lo, sep, hi = value.partition(":")
            if not sep:
                raise ConfigError(f"{key}: expected lo:hi, got {value!r}")
            range_overrides[key[len("dataset.range."):]] = (_convert(key, lo, int), _convert(key, hi, int))
    try:
        dataset_range = ProblemRange.default(kind, **range_overrides)
    except MapSearchError as e:
        raise ConfigError(f"dataset.range: {e}")

    if v["model.widths"]:
        hidden = tuple(_convert("model.widths", w, int) for w in _split(v["model.widths"]))
    elif v["model.preset"] in TOPOLOGY_PRESETS:
        hidden = TOPOLOGY_PRESETS[v["model.preset"]]
    else:
        raise ConfigError(f"model.preset: unknown preset {v['model.preset']!r}")
    if v["model.activation"] not in ACTIVATIONS:
        raise ConfigError(f"model.activation: choose from {', '.join(ACTIVATIONS)}")

    if v["sa.t0"] == "auto":
        if not _bool("sa.autotune", v["sa.autotune"]):
            raise ConfigError("sa.t0 = auto requires sa.autotune = true")
        sa_t0 = None
    else:
        sa_t0 = _convert("sa.t0", v["sa.t0"], float)

    runs = _convert("runs", v["runs"], int)
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    test_fraction = _convert("dataset.test_fraction", v["dataset.test_fraction"], float)
    if not 0 <= test_fraction < 1:
        raise ConfigError("dataset.test_fraction must be in [0, 1)")
    output_dir = v["output_dir"]
    seed = _convert("seed", v["seed"], int)

    return ExperimentConfig(
        kind=kind,
        problems=problems,
        accel_name=v["accel"],
        accel=accel,
        methods=methods,
        runs=runs,
        seed=seed,
        output_dir=output_dir,
        workers=max(1, _convert("workers", v["workers"], int)),
        budget=budget,
        dataset_size=_convert("dataset.size", v["dataset.size"], int),
        dataset_range=dataset_range,
        test_fraction=test_fraction,
        dataset_path=v["dataset.path"] or os.path.join(output_dir, f"dataset-{kind.value}.csv"),
        hidden=hidden,
        activation=v["model.activation"],
        model_path=v["model.path"] or os.path.join(output_dir, f"model-{kind.value}.npz"),
        train=TrainConfig(
            epochs=_convert("train.epochs", v["train.epochs"], int),
            batch_size=_convert("train.batch_size", v["train.batch_size"], int),
            lr=_convert("train.lr", v["train.lr"], float),
            lr_decay=_convert("train.lr_decay", v["train.lr_decay"], float),
            lr_decay_every=_convert("train.lr_decay_every", v["train.lr_decay_every"], int),
            momentum=_convert("train.momentum", v["train.momentum"], float),
            loss=v["train.loss"],
            huber_delta=_convert("train.huber_delta", v["train.huber_delta"], float),
            seed=seed),
        mm=GradSearchConfig(
            alpha=_convert("mm.alpha", v["mm.alpha"], float),
            inject_every=_convert("mm.inject_every", v["mm.inject_every"], int),
            t0=_convert("mm.t0", v["mm.t0"], float),
            anneal_factor=_convert("mm.anneal_factor", v["mm.anneal_factor"], float),
            anneal_every=_convert("mm.anneal_every", v["mm.anneal_every"], int)),
        sa=SaConfig(t0=sa_t0, cooling=_convert("sa.cooling", v["sa.cooling"], float)),
        ga=GaConfig(
            population=_convert("ga.population", v["ga.population"], int),
            crossover=_convert("ga.crossover", v["ga.crossover"], float),
            mutation=_convert("ga.mutation", v["ga.mutation"], float),
            elitism=_convert("ga.elitism", v["ga.elitism"], int),
            tournament=_convert("ga.tournament", v["ga.tournament"], int)),
        surface_x=v["surface.x"],
        surface_y=v["surface.y"],
        surface_seed=_convert("surface.seed", v["surface.seed"], int),
        characterize_samples=_convert("characterize.samples", v["characterize.samples"], int),
        listing="\n".join(f"{key}={v[key]}" for key in sorted(v)),
    )


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read a config file (or defaults only) and apply `key=value` overrides on top."""
    values: "OrderedDict[str, str]" = OrderedDict()
    if path:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}")
        values = parse_config_text(text, path)
        logger.debug(f"Loaded {len(values)} settings from {path}")
    extra = parse_config_text("\n".join(overrides), "--set")
    values.update(extra)
    return build_config(values)
