"""Target algorithms: iteration spaces, tensor footprints and a naive executor.

Loops run over the kernel's iteration space. For the convolutions the W (and
H) loop covers the W-R+1 (H-S+1) output positions, so tile sizes along W
divide W-R+1. A tensor axis indexed by w+r is a sliding window whose tile
footprint is Tw+Tr-1.
"""
import itertools
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Set, Tuple

import numpy as np

from mapsearch.errors import InvalidProblemError, SchemaError
from mapsearch.models import AlgorithmKind, Problem

# tensor -> axes; each axis is the tuple of dim indices summed to index it.
_TENSOR_AXES = {
    AlgorithmKind.CONV1D: {
        "I": ((0, 1),),
        "O": ((0,),),
        "F": ((1,),),
    },
    # dims: N0 K1 C2 H3 W4 R5 S6
    AlgorithmKind.CONV: {
        "I": ((0,), (2,), (3, 6), (4, 5)),
        "O": ((0,), (1,), (3,), (4,)),
        "F": ((1,), (2,), (5,), (6,)),
    },
    # dims: I0 J1 K2 L3
    AlgorithmKind.MTTKRP: {
        "A": ((0,), (2,), (3,)),
        "B": ((2,), (1,)),
        "C": ((3,), (1,)),
        "O": ((0,), (1,)),
    },
}

OUTPUT_TENSOR = "O"

# Target problem table plus desk-scale shapes small enough to run anywhere.
_PRESETS = {
    AlgorithmKind.CONV1D: OrderedDict([
        ("conv1d-tiny", (8, 3)),
        ("conv1d-desk", (32, 4)),
    ]),
    AlgorithmKind.CONV: OrderedDict([
        ("resnet-conv3", (16, 128, 128, 28, 28, 3, 3)),
        ("resnet-conv4", (16, 256, 256, 14, 14, 3, 3)),
        ("inception-conv2", (32, 192, 192, 56, 56, 3, 3)),
        ("vgg-conv2", (16, 128, 64, 112, 112, 3, 3)),
        ("alexnet-conv2", (8, 256, 96, 27, 27, 5, 5)),
        ("alexnet-conv4", (8, 384, 384, 13, 13, 3, 3)),
        ("conv-tiny", (1, 2, 2, 4, 4, 2, 2)),
        ("conv-desk", (2, 8, 8, 10, 10, 3, 3)),
    ]),
    AlgorithmKind.MTTKRP: OrderedDict([
        ("mttkrp-0", (128, 1024, 4096, 2048)),
        ("mttkrp-1", (2048, 4096, 1024, 128)),
        ("mttkrp-tiny", (2, 3, 4, 5)),
        ("mttkrp-desk", (8, 8, 8, 8)),
    ]),
}


def problem_presets(kind: AlgorithmKind) -> "OrderedDict[str, Problem]":
    return OrderedDict((name, Problem(kind, dims)) for name, dims in _PRESETS[kind].items())


def parse_problem(kind: AlgorithmKind, text: str) -> Problem:
    """Parse a preset name or an x-joined dims tuple such as `8x3`."""
    text = text.strip()
    presets = _PRESETS[kind]
    if text in presets:
        return Problem(kind, presets[text])
    try:
        dims = tuple(int(part) for part in text.lower().split("x"))
    except ValueError:
        raise InvalidProblemError(
            f"Unknown {kind.value} problem {text!r}; presets are {', '.join(presets)}")
    return Problem(kind, dims)


def tensor_axes(kind: AlgorithmKind, tensor: str) -> Tuple[Tuple[int, ...], ...]:
    try:
        return _TENSOR_AXES[kind][tensor]
    except KeyError:
        raise SchemaError(f"Tensor {tensor!r} is not an operand of {kind.value}")


def relevant_dims(kind: AlgorithmKind, tensor: str) -> Tuple[int, ...]:
    return tuple(sorted({d for axis in tensor_axes(kind, tensor) for d in axis}))


def iteration_bounds(p: Problem) -> Tuple[int, ...]:
    if p.kind is AlgorithmKind.CONV1D:
        w, r = p.dims
        return (w - r + 1, r)
    if p.kind is AlgorithmKind.CONV:
        n, k, c, h, w, r, s = p.dims
        return (n, k, c, h - s + 1, w - r + 1, r, s)
    return p.dims


def required_flops(p: Problem) -> int:
    return math.prod(iteration_bounds(p))


def tile_footprint(kind: AlgorithmKind, tensor: str, tile: Sequence[int]) -> int:
    """Words of `tensor` touched by an iteration tile of the given extents."""
    words = 1
    for axis in tensor_axes(kind, tensor):
        words *= sum(tile[d] for d in axis) - (len(axis) - 1)
    return words


def tensor_shape(p: Problem, tensor: str) -> Tuple[int, ...]:
    bounds = iteration_bounds(p)
    return tuple(sum(bounds[d] for d in axis) - (len(axis) - 1)
                 for axis in tensor_axes(p.kind, tensor))


def tensor_footprint(p: Problem, tensor: str) -> int:
    return tile_footprint(p.kind, tensor, iteration_bounds(p))


def random_inputs(p: Problem, rng: np.random.Generator, low: int = -4, high: int = 4) -> Dict[str, np.ndarray]:
    """Small-integer operands, so tiled and untiled sums agree exactly."""
    return {t: rng.integers(low, high + 1, size=tensor_shape(p, t), dtype=np.int64)
            for t in p.kind.tensors if t != OUTPUT_TENSOR}


def _check_inputs(p: Problem, inputs: Dict[str, np.ndarray]) -> None:
    for t in p.kind.tensors:
        if t == OUTPUT_TENSOR:
            continue
        if t not in inputs:
            raise SchemaError(f"Missing input tensor {t} for {p.label}")
        expected = tensor_shape(p, t)
        if tuple(np.shape(inputs[t])) != expected:
            raise SchemaError(f"Tensor {t} should have shape {expected}, got {np.shape(inputs[t])}")


@dataclass
class ExecutionTrace:
    """Instrumentation for golden_execute: MAC count and distinct words touched."""
    macs: int = 0
    touched: Dict[str, Set[Tuple[int, ...]]] = field(default_factory=dict)


def golden_execute(p: Problem, inputs: Dict[str, np.ndarray],
                   trace: Optional[ExecutionTrace] = None) -> np.ndarray:
    """Untiled evaluation of the kernel equation, one MAC per iteration point."""
    _check_inputs(p, inputs)
    axes = _TENSOR_AXES[p.kind]
    operands = [t for t in p.kind.tensors if t != OUTPUT_TENSOR]
    out = np.zeros(tensor_shape(p, OUTPUT_TENSOR), dtype=np.result_type(*inputs.values()))
    if trace is not None:
        for t in p.kind.tensors:
            trace.touched.setdefault(t, set())

    for point in itertools.product(*(range(b) for b in iteration_bounds(p))):
        index = {t: tuple(sum(point[d] for d in axis) for axis in axes[t]) for t in p.kind.tensors}
        product = 1
        for t in operands:
            product = product * inputs[t][index[t]]
        out[index[OUTPUT_TENSOR]] += product
        if trace is not None:
            trace.macs += 1
            for t, idx in index.items():
                trace.touched[t].add(idx)
    return out
