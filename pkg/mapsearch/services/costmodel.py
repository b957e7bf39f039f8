"""Analytical energy/latency model and its algorithmic lower bound.

Traffic is counted at three boundaries: DRAM->L2 (the L2 tile, under the DRAM
loops), L2->L1 (each PE's shard of the L1 tile, under the DRAM and L2 loops)
and L1->PE (one word per operand, under all temporal loops). A tile stays
resident while only loops irrelevant to its tensor advance, so the number of
transfers is the product of the trip counts from the outermost loop down to
the innermost relevant loop with more than one trip.
"""
import logging
from collections import OrderedDict
from functools import lru_cache
from typing import List, Sequence, Tuple

from mapsearch.errors import InvalidMappingError, SchemaError
from mapsearch.models import (
    LEVELS,
    AcceleratorConfig,
    CostVector,
    Mapping,
    Objective,
    Problem,
    cost_columns,
)
from mapsearch.services.mapspace import MapSpaceCtx, is_member
from mapsearch.services.workload import relevant_dims, required_flops, tensor_footprint, tile_footprint

logger = logging.getLogger(__name__)

_ENERGY = dict(e_dram=200.0, e_l2=6.0, e_l1=1.0, mac_energy=0.5)


def accelerator_presets() -> "OrderedDict[str, AcceleratorConfig]":
    return OrderedDict([
        # 512 KB shared and 64 KB private buffers of 16-bit words, 256 PEs at 1 GHz
        ("large", AcceleratorConfig(num_pes=256, l2_capacity=262144, l1_capacity=32768,
                                    l2_banks=8, l1_banks=8, **_ENERGY)),
        ("desk", AcceleratorConfig(num_pes=16, l2_capacity=4096, l1_capacity=256,
                                   l2_banks=8, l1_banks=4, **_ENERGY)),
        ("tiny", AcceleratorConfig(num_pes=4, l2_capacity=64, l1_capacity=16,
                                   l2_banks=4, l1_banks=4, **_ENERGY)),
        ("single-pe", AcceleratorConfig(num_pes=1, l2_capacity=2 ** 20, l1_capacity=2 ** 16,
                                        l2_banks=4, l1_banks=4, **_ENERGY)),
    ])


def loop_nest(m: Mapping) -> List[Tuple[int, int, int]]:
    """Temporal loops outermost first as (level, dim, trips)."""
    loops = []
    for level in range(3):
        below = m.tiles[level + 1] if level < 2 else m.par
        for d in m.order[level]:
            loops.append((level, d, m.tiles[level][d] // below[d]))
    return loops


def refetch_count(loops: Sequence[Tuple[int, int, int]], relevant: Sequence[int]) -> int:
    count = 1
    innermost = -1
    for i, (_, d, trips) in enumerate(loops):
        if d in relevant and trips > 1:
            innermost = i
    for _, _, trips in loops[:innermost + 1]:
        count *= trips
    return count


def access_counts(p: Problem, m: Mapping) -> Tuple[Tuple[int, ...], ...]:
    """Words moved out of each level (DRAM, L2, L1) per tensor."""
    loops = loop_nest(m)
    n = len(p.dims)
    l2_end = n
    l1_end = 2 * n
    pes = m.num_active_pes()
    shard = m.shard()
    ones = (1,) * len(shard)
    rows = []
    for level in range(3):
        row = []
        for t in p.kind.tensors:
            relevant = relevant_dims(p.kind, t)
            if level == 0:
                words = tile_footprint(p.kind, t, m.tiles[1]) * refetch_count(loops[:l2_end], relevant)
            elif level == 1:
                words = pes * tile_footprint(p.kind, t, shard) * refetch_count(loops[:l1_end], relevant)
            else:
                words = pes * tile_footprint(p.kind, t, ones) * refetch_count(loops, relevant)
            row.append(words)
        rows.append(tuple(row))
    return tuple(rows)


def _cost_from_counts(accel: AcceleratorConfig, p: Problem, counts, active_pes: int) -> CostVector:
    energy = tuple(tuple(float(c) * accel.energy_per_word(level) for c in row)
                   for level, row in zip(LEVELS, counts))
    flops = required_flops(p)
    total = sum(sum(row) for row in energy) + accel.mac_energy * flops
    cycles = -(-flops // (accel.flops_per_pe * active_pes))
    return CostVector(p.kind, energy, total, float(cycles), active_pes / accel.num_pes, accel.clock_hz)


def evaluate(accel: AcceleratorConfig, p: Problem, m: Mapping) -> CostVector:
    if not is_member(MapSpaceCtx(p, accel), m):
        raise InvalidMappingError(f"Mapping is not a member of the map space of {p.label}")
    return _cost_from_counts(accel, p, access_counts(p, m), m.num_active_pes())


@lru_cache(maxsize=65536)
def algorithmic_minimum(accel: AcceleratorConfig, p: Problem) -> CostVector:
    """Every word crosses each boundary once and every PE is busy every cycle."""
    counts = tuple(tuple(tensor_footprint(p, t) for t in p.kind.tensors) for _ in LEVELS)
    return _cost_from_counts(accel, p, counts, accel.num_pes)


def objective_value(cv: CostVector, obj: Objective) -> float:
    if obj.is_edp:
        return cv.edp
    values = cv.as_array()
    if len(obj.weights) != len(values):
        raise SchemaError(f"Objective has {len(obj.weights)} weights for {len(values)} cost components")
    return float(sum(w * v for w, v in zip(obj.weights, values)))


def normalized_objective(accel: AcceleratorConfig, p: Problem, cv: CostVector, obj: Objective) -> float:
    """Objective relative to the algorithmic minimum, scale-free across problems."""
    floor = objective_value(algorithmic_minimum(accel, p), obj)
    value = objective_value(cv, obj)
    return value / floor if floor > 0 else value


def describe(cv: CostVector) -> "OrderedDict[str, float]":
    out = OrderedDict(zip(cost_columns(cv.kind), (float(x) for x in cv.as_array())))
    out["edp"] = cv.edp
    return out
