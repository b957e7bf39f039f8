"""Differentiable surrogate of the cost model: a plain numpy MLP.

Inputs are normalized mapping vectors, outputs normalized cost vectors (see
dataset.NormStats). Besides weight training the model exposes the exact
gradient of a scalarized output with respect to its input, which is what the
gradient search descends on.
"""
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import spearmanr

from mapsearch.errors import (
    ConfigError,
    FingerprintMismatchError,
    ModelFileError,
    SchemaError,
    TrainingDivergedError,
)
from mapsearch.models import LEVELS, AcceleratorConfig, AlgorithmKind, CostVector, Mapping, Problem
from mapsearch.services.dataset import Dataset, NormStats, invert_norm, lower_bound_divisors, normalize_dataset
from mapsearch.services.mapspace import MapSpaceCtx, encode, vector_layout

logger = logging.getLogger(__name__)

FORMAT = "mapsearch-mlp/1"
ACTIVATIONS = ("relu", "softplus")
LOSSES = ("huber", "mse", "mae")

TOPOLOGY_PRESETS = {
    "desk": (32, 64, 64, 32),
    "large": (64, 256, 1024, 2048, 2048, 1024, 256, 64),
}


@dataclass
class MlpModel:
    kind: AlgorithmKind
    widths: Tuple[int, ...]  # input, hidden..., output
    activation: str
    weights: List[np.ndarray]  # layer i maps widths[i] -> widths[i + 1]
    biases: List[np.ndarray]
    norm: Optional[NormStats] = None

    @property
    def n_pid(self) -> int:
        return len(self.kind.dims)

    @property
    def energy_index(self) -> int:
        return len(LEVELS) * len(self.kind.tensors)

    @property
    def cycles_index(self) -> int:
        return self.widths[-1] - 1


def output_width(kind: AlgorithmKind) -> int:
    return len(LEVELS) * len(kind.tensors) + 3


def build_model(kind: AlgorithmKind, hidden: Sequence[int] = TOPOLOGY_PRESETS["desk"],
                activation: str = "relu", seed: int = 0, norm: Optional[NormStats] = None) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    if activation not in ACTIVATIONS:
        raise ConfigError(f"Unknown activation {activation!r}; choose from {ACTIVATIONS}")
    widths = (vector_layout(kind).length, *(int(h) for h in hidden), output_width(kind))
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(kind, widths, activation, weights, biases, norm)


def _act(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return np.logaddexp(0.0, z)


def _act_grad(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0).astype(float)
    return expit(z)


def _forward_cache(model: MlpModel, x: np.ndarray):
    pre, post = [], [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _act(z, model.activation)
        post.append(h)
    return pre, post


def _check_width(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.widths[0]:
        raise SchemaError(f"Model expects inputs of width {model.widths[0]}, got {x.shape[-1]}")
    return x


def forward(model: MlpModel, x) -> np.ndarray:
    x = _check_width(model, x)
    return _forward_cache(model, x)[1][-1]


def _backward(model: MlpModel, pre, post, dout: np.ndarray):
    """Reverse pass; returns (weight grads, bias grads, input grad)."""
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    delta = dout
    for i in range(len(model.weights) - 1, -1, -1):
        if i != len(model.weights) - 1:
            delta = delta * _act_grad(pre[i], model.activation)
        grads_w[i] = np.atleast_2d(post[i]).T @ np.atleast_2d(delta)
        grads_b[i] = np.atleast_2d(delta).sum(axis=0)
        delta = delta @ model.weights[i].T
    return grads_w, grads_b, delta


def loss(pred, target, kind: str = "huber", delta: float = 1.0) -> Tuple[float, np.ndarray]:
    """Mean loss over every element and its gradient with respect to pred."""
    r = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    n = r.size
    if kind == "mse":
        return float(np.mean(r ** 2)), 2.0 * r / n
    if kind == "mae":
        return float(np.mean(np.abs(r))), np.sign(r) / n
    if kind == "huber":
        a = np.abs(r)
        value = np.where(a <= delta, 0.5 * r ** 2, delta * (a - 0.5 * delta))
        return float(np.mean(value)), np.clip(r, -delta, delta) / n
    raise ConfigError(f"Unknown loss {kind!r}; choose from {LOSSES}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-2
    lr_decay: float = 0.1
    lr_decay_every: int = 25
    momentum: float = 0.9
    loss: str = "huber"
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum must be in [0, 1)")
        if self.huber_delta <= 0:
            raise ConfigError("train.huber_delta must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ConfigError("train.epochs, train.batch_size and train.lr_decay_every must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"Unknown loss {self.loss!r}; choose from {LOSSES}")


@dataclass
class TrainResult:
    model: MlpModel
    curve: pd.DataFrame = field(repr=False)  # epoch, lr, train_loss, test_loss


def _mean_loss(model, x, y, cfg) -> float:
    if len(x) == 0:
        return float("nan")
    return loss(forward(model, x), y, cfg.loss, cfg.huber_delta)[0]


def train(model: MlpModel, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Mini-batch SGD with momentum and step learning-rate decay; updates model in place."""
    if model.norm is None:
        raise SchemaError("Model has no normalization statistics; fit them before training")
    xn, yn = normalize_dataset(model.norm, dataset)
    train_mask = dataset.split == "train"
    x_train, y_train = xn[train_mask], yn[train_mask]
    x_test, y_test = xn[~train_mask], yn[~train_mask]
    rng = np.random.default_rng(cfg.seed)
    velocity_w = [np.zeros_like(w) for w in model.weights]
    velocity_b = [np.zeros_like(b) for b in model.biases]
    rows = []
    logger.info(f"Training {model.widths} on {len(x_train)} records ({len(x_test)} held out)...")
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            pre, post = _forward_cache(model, x_train[batch])
            value, dout = loss(post[-1], y_train[batch], cfg.loss, cfg.huber_delta)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"Loss became {value} in epoch {epoch + 1}; lower train.lr (currently {lr:g})")
            grads_w, grads_b, _ = _backward(model, pre, post, dout)
            for i in range(len(model.weights)):
                velocity_w[i] = cfg.momentum * velocity_w[i] - lr * grads_w[i]
                velocity_b[i] = cfg.momentum * velocity_b[i] - lr * grads_b[i]
                model.weights[i] += velocity_w[i]
                model.biases[i] += velocity_b[i]
        train_loss = _mean_loss(model, x_train, y_train, cfg)
        test_loss = _mean_loss(model, x_test, y_test, cfg)
        if not all(np.isfinite(w).all() for w in model.weights):
            raise TrainingDivergedError(f"Weights became non-finite in epoch {epoch + 1}; lower train.lr")
        rows.append({"epoch": epoch + 1, "lr": lr, "train_loss": train_loss, "test_loss": test_loss})
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: train {train_loss:.6f}, test {test_loss:.6f}")
    return TrainResult(model, pd.DataFrame(rows, columns=["epoch", "lr", "train_loss", "test_loss"]))


def input_gradient(model: MlpModel, x, objective_weights) -> np.ndarray:
    """Gradient of objective_weights . forward(x) with respect to x, with the
    problem-id coordinates masked to zero."""
    x = _check_width(model, x)
    w = np.asarray(objective_weights, dtype=float)
    if w.shape != (model.widths[-1],):
        raise SchemaError(f"Objective weights need {model.widths[-1]} entries, got {w.shape}")
    pre, post = _forward_cache(model, x)
    grad = _backward(model, pre, post, w)[2]
    grad = np.array(grad, dtype=float).reshape(x.shape)
    grad[..., :model.n_pid] = 0.0
    return grad


def edp_objective(model: MlpModel, x) -> Tuple[float, np.ndarray]:
    """Predicted EDP relative to the algorithmic minimum, and its input gradient.

    The energy_total and cycles outputs are de-standardized back to multiples
    of their lower bounds; their product is the scalar being descended, so the
    gradient weights each output by the other factor (product rule).
    """
    if model.norm is None:
        raise SchemaError("Model has no normalization statistics")
    x = _check_width(model, x)
    ie, ic = model.energy_index, model.cycles_index
    out = forward(model, x)
    energy = model.norm.out_mean[ie] + model.norm.out_std[ie] * out[ie]
    cycles = model.norm.out_mean[ic] + model.norm.out_std[ic] * out[ic]
    weights = np.zeros(model.widths[-1])
    weights[ie] = cycles * model.norm.out_std[ie]
    weights[ic] = energy * model.norm.out_std[ic]
    return float(energy * cycles), input_gradient(model, x, weights)


def predicted_edp_ratio(model: MlpModel, x) -> float:
    out = forward(model, x)
    ie, ic = model.energy_index, model.cycles_index
    energy = model.norm.out_mean[ie] + model.norm.out_std[ie] * out[ie]
    cycles = model.norm.out_mean[ic] + model.norm.out_std[ic] * out[ic]
    return float(energy * cycles)


def predict_cost(model: MlpModel, problem: Problem, mapping: Mapping) -> CostVector:
    ctx = MapSpaceCtx(problem, model.norm.accel)
    x = model.norm.normalize_input(encode(ctx, mapping))
    return invert_norm(model.norm, forward(model, x), problem.dims)


def predict_edp(model: MlpModel, x_raw: np.ndarray) -> np.ndarray:
    """Predicted EDP for a batch of raw mapping vectors."""
    stats = model.norm
    out = forward(model, stats.normalize_input(x_raw))
    div = np.stack([lower_bound_divisors(stats.accel, stats.kind, row[:model.n_pid]) for row in x_raw])
    raw = (out * stats.out_std + stats.out_mean) * div
    return raw[:, model.energy_index] * raw[:, model.cycles_index] / stats.accel.clock_hz


def rank_quality(model: MlpModel, dataset: Dataset, split: str = "test") -> float:
    """Spearman rank correlation between predicted and true EDP."""
    part = dataset.subset(split)
    if len(part) < 2:
        return float("nan")
    true = part.y[:, model.energy_index] * part.y[:, model.cycles_index]
    rho = spearmanr(predict_edp(model, part.x), true).correlation
    return float(rho)


def check_compatible(model: MlpModel, ctx: MapSpaceCtx) -> None:
    if model.kind is not ctx.kind:
        raise FingerprintMismatchError(f"Model was trained for {model.kind.value}, not {ctx.kind.value}")
    if model.norm is None:
        raise FingerprintMismatchError("Model carries no normalization statistics")
    if model.norm.accel.fingerprint() != ctx.accel.fingerprint():
        raise FingerprintMismatchError("Model was trained for a different accelerator configuration")


def save(model: MlpModel, path: str) -> None:
    """Write the model as an .npz container: a JSON `meta` entry, float64 layer
    parameters W0.., b0.. and the four normalization vectors."""
    if model.norm is None:
        raise SchemaError("Refusing to save a model without normalization statistics")
    meta = {
        "format": FORMAT,
        "kind": model.kind.value,
        "widths": list(model.widths),
        "activation": model.activation,
        "accel": asdict(model.norm.accel),
        "dataset": model.norm.fingerprint,
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    for name in ("in_mean", "in_std", "out_mean", "out_std"):
        arrays[name] = getattr(model.norm, name)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info(f"Saved model {model.widths} to {path}")


def load(path: str) -> MlpModel:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("format") != FORMAT:
                raise ModelFileError(f"{path} is not a {FORMAT} file")
            kind = AlgorithmKind.parse(meta["kind"])
            widths = tuple(meta["widths"])
            n_layers = len(widths) - 1
            weights = [data[f"W{i}"].astype(float) for i in range(n_layers)]
            biases = [data[f"b{i}"].astype(float) for i in range(n_layers)]
            norm = NormStats(kind, AcceleratorConfig(**meta["accel"]), data["in_mean"], data["in_std"],
                             data["out_mean"], data["out_std"], meta["dataset"])
    except ModelFileError:
        raise
    except (OSError, EOFError, KeyError, ValueError, TypeError, zipfile.BadZipFile) as e:
        raise ModelFileError(f"Cannot read model file {path}: {e}")
    for i, w in enumerate(weights):
        if w.shape != (widths[i], widths[i + 1]):
            raise ModelFileError(f"{path}: layer {i} has shape {w.shape}, expected {(widths[i], widths[i + 1])}")
    if widths[0] != vector_layout(kind).length or widths[-1] != output_width(kind):
        raise FingerprintMismatchError(f"{path}: widths {widths} do not fit the {kind.value} schema")
    return MlpModel(kind, widths, meta["activation"], weights, biases, norm)
