"""Tiled loop-nest interpreter: the oracle the analytical model is checked against.

The interpreter walks every iteration of the mapped loop nest, keeps the
coordinate of the tile each buffer currently holds, and charges a tile's
footprint whenever that coordinate changes. It also performs the MACs, so the
result can be compared with the untiled executor.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from mapsearch.errors import InvalidMappingError, SimulationCapError
from mapsearch.models import AcceleratorConfig, Mapping, Problem
from mapsearch.services.mapspace import MapSpaceCtx, is_member
from mapsearch.services.workload import (
    OUTPUT_TENSOR,
    iteration_bounds,
    random_inputs,
    relevant_dims,
    required_flops,
    tensor_axes,
    tensor_shape,
    tile_footprint,
)

logger = logging.getLogger(__name__)

DIM_CAP = 64
MAC_CAP = 5_000_000


@dataclass
class SimulationResult:
    counts: Tuple[Tuple[int, ...], ...]  # words moved out of DRAM, L2, L1 per tensor
    output: np.ndarray
    inputs: Dict[str, np.ndarray]


def _ordered_points(order, trips):
    """Yield per-dim index tuples of a loop level, iterating in `order`."""
    n = len(trips)
    for idx in itertools.product(*(range(trips[d]) for d in order)):
        point = [0] * n
        for d, i in zip(order, idx):
            point[d] = i
        yield point


def simulate(accel: AcceleratorConfig, p: Problem, m: Mapping,
             inputs: Optional[Dict[str, np.ndarray]] = None, cap: int = DIM_CAP,
             seed: int = 0) -> SimulationResult:
    bounds = iteration_bounds(p)
    if max(bounds) > cap or required_flops(p) > MAC_CAP:
        raise SimulationCapError(f"{p.label} exceeds the simulation cap (dims <= {cap}, MACs <= {MAC_CAP})")
    if not is_member(MapSpaceCtx(p, accel), m):
        raise InvalidMappingError(f"Mapping is not a member of the map space of {p.label}")
    if inputs is None:
        inputs = random_inputs(p, np.random.default_rng(seed))

    kind = p.kind
    tensors = kind.tensors
    n = len(bounds)
    axes = {t: tensor_axes(kind, t) for t in tensors}
    relevant = {t: relevant_dims(kind, t) for t in tensors}
    operands = [t for t in tensors if t != OUTPUT_TENSOR]
    out = np.zeros(tensor_shape(p, OUTPUT_TENSOR), dtype=np.result_type(*inputs.values()))

    l2_tile, l1_tile, par = m.tiles[1], m.tiles[2], m.par
    shard = m.shard()
    trips = (
        tuple(m.tiles[0][d] // l2_tile[d] for d in range(n)),
        tuple(l2_tile[d] // l1_tile[d] for d in range(n)),
        shard,
    )
    fp_l2 = {t: tile_footprint(kind, t, l2_tile) for t in tensors}
    fp_shard = {t: tile_footprint(kind, t, shard) for t in tensors}
    pes = list(itertools.product(*(range(par[d]) for d in range(n))))

    counts = [[0] * len(tensors) for _ in range(3)]
    resident: Dict[tuple, tuple] = {}

    def touch(level, pe, ti, coord, words):
        key = (level, pe, ti)
        if resident.get(key) != coord:
            resident[key] = coord
            counts[level][ti] += words

    for i0 in _ordered_points(m.order[0], trips[0]):
        off0 = [i0[d] * l2_tile[d] for d in range(n)]
        for ti, t in enumerate(tensors):
            touch(0, (), ti, tuple(off0[d] for d in relevant[t]), fp_l2[t])

        for i1 in _ordered_points(m.order[1], trips[1]):
            off1 = [off0[d] + i1[d] * l1_tile[d] for d in range(n)]
            bases = []
            for pe in pes:
                base = [off1[d] + pe[d] * shard[d] for d in range(n)]
                bases.append(base)
                for ti, t in enumerate(tensors):
                    touch(1, pe, ti, tuple(base[d] for d in relevant[t]), fp_shard[t])

            for i2 in _ordered_points(m.order[2], trips[2]):
                for pe, base in zip(pes, bases):
                    g = [base[d] + i2[d] for d in range(n)]
                    index = {t: tuple(sum(g[d] for d in axis) for axis in axes[t]) for t in tensors}
                    for ti, t in enumerate(tensors):
                        touch(2, pe, ti, tuple(g[d] for d in relevant[t]), 1)
                    product = 1
                    for t in operands:
                        product = product * inputs[t][index[t]]
                    out[index[OUTPUT_TENSOR]] += product

    return SimulationResult(tuple(tuple(row) for row in counts), out, inputs)
