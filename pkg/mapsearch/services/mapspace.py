"""Map space of a (problem, accelerator) pair.

Mappings flatten to a real vector laid out as

    [dims | factor(DRAM, d) | factor(L2, d) | factor(L1, d) | par(d) |
     order score(level, d) | alloc(L2, t) | alloc(L1, t)]

where factor(level, d) is the ratio of the level's tile to the next level's
tile (the PE split for L1) and the loop order at a level is the descending
argsort of its scores, ties broken by dim index.
"""
import itertools
import logging
import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from mapsearch.errors import EmptyMapSpaceError, SchemaError
from mapsearch.models import (
    LEVELS,
    ONCHIP_LEVELS,
    AcceleratorConfig,
    AlgorithmKind,
    Mapping,
    Problem,
)
from mapsearch.services.workload import iteration_bounds, relevant_dims, tile_footprint

logger = logging.getLogger(__name__)

MAX_DRAWS = 10 ** 6
RECORD_HEADER = "# mapsearch-mapping v1"

RngLike = Union[int, Sequence[int], np.random.Generator, None]


def as_generator(seed: RngLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@lru_cache(maxsize=4096)
def divisors(n: int) -> Tuple[int, ...]:
    small, large = [], []
    for i in range(1, int(math.isqrt(n)) + 1):
        if n % i == 0:
            small.append(i)
            if i != n // i:
                large.append(n // i)
    return tuple(small + large[::-1])


@lru_cache(maxsize=4096)
def factor_chains(n: int, parts: int = 4) -> Tuple[Tuple[int, ...], ...]:
    """Every ordered factorization of n into `parts` factors."""
    if parts == 1:
        return ((n,),)
    return tuple((d,) + rest for d in divisors(n) for rest in factor_chains(n // d, parts - 1))


def log_target(value: float, top: int) -> float:
    """Log of value clamped to [1, top]; nan reads as 1. Clamping keeps the
    ranking of divisors of top by log distance unchanged."""
    if math.isnan(value):
        return 0.0
    return math.log(min(max(float(value), 1.0), top))


def nearest_divisor(n: int, value: float) -> int:
    """Divisor of n closest to value in log space; ties go to the smaller one."""
    target = log_target(value, n)
    return min(divisors(n), key=lambda d: (abs(math.log(d) - target), d))


def count_compositions(banks: int, parts: int) -> int:
    """Number of non-negative integer vectors of length `parts` summing to at most `banks`."""
    if banks < 0:
        return 0
    return math.comb(banks + parts, parts)


@dataclass(frozen=True)
class VectorLayout:
    n_pid: int
    n_dims: int
    n_tensors: int

    @property
    def factors(self) -> slice:
        return slice(self.n_pid, self.n_pid + 3 * self.n_dims)

    @property
    def par(self) -> slice:
        start = self.factors.stop
        return slice(start, start + self.n_dims)

    @property
    def scores(self) -> slice:
        start = self.par.stop
        return slice(start, start + 3 * self.n_dims)

    @property
    def alloc(self) -> slice:
        start = self.scores.stop
        return slice(start, start + 2 * self.n_tensors)

    @property
    def length(self) -> int:
        return self.alloc.stop

    def factor_index(self, level: int, d: int) -> int:
        return self.n_pid + level * self.n_dims + d

    def par_index(self, d: int) -> int:
        return self.par.start + d

    def score_slice(self, level: int) -> slice:
        start = self.scores.start + level * self.n_dims
        return slice(start, start + self.n_dims)

    def alloc_slice(self, onchip: int) -> slice:
        start = self.alloc.start + onchip * self.n_tensors
        return slice(start, start + self.n_tensors)

    def groups(self) -> List[Tuple[str, np.ndarray]]:
        """Attribute groups swapped by crossover: one tiling chain per dim, one order
        and one allocation row per level."""
        out = []
        for d in range(self.n_dims):
            idx = [self.factor_index(level, d) for level in range(3)] + [self.par_index(d)]
            out.append((f"tile:{d}", np.array(idx)))
        for level in range(3):
            s = self.score_slice(level)
            out.append((f"order:{level}", np.arange(s.start, s.stop)))
        for i in range(2):
            s = self.alloc_slice(i)
            out.append((f"alloc:{i}", np.arange(s.start, s.stop)))
        return out


def vector_layout(kind: AlgorithmKind) -> VectorLayout:
    return VectorLayout(len(kind.dims), len(kind.dims), len(kind.tensors))


@dataclass(frozen=True)
class MapSpaceCtx:
    problem: Problem
    accel: AcceleratorConfig

    @property
    def kind(self) -> AlgorithmKind:
        return self.problem.kind

    @cached_property
    def bounds(self) -> Tuple[int, ...]:
        return iteration_bounds(self.problem)

    @cached_property
    def layout(self) -> VectorLayout:
        return vector_layout(self.kind)

    @cached_property
    def relevant(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(relevant_dims(self.kind, t) for t in self.kind.tensors)

    @cached_property
    def chains(self) -> Tuple[Tuple[Tuple[int, ...], ...], ...]:
        return tuple(factor_chains(b) for b in self.bounds)

    @cached_property
    def chain_tables(self) -> Tuple[np.ndarray, ...]:
        return tuple(np.array(c, dtype=np.int64) for c in self.chains)

    def banks_needed(self, level: str, words: int) -> int:
        # words <= k * capacity / num_banks, kept in integers
        cap, nb = self.accel.capacity(level), self.accel.num_banks(level)
        return -(-words * nb // cap)

    def is_empty(self) -> bool:
        """With every tile at 1 each tensor needs one word per level; that mapping
        exists iff every level has a bank per tensor holding at least one word."""
        n_tensors = len(self.kind.tensors)
        return any(self.accel.num_banks(level) < n_tensors or self.banks_needed(level, 1) > 1
                   for level in ONCHIP_LEVELS)


def _tiles_from_chains(bounds, chains) -> Tuple[Tuple[Tuple[int, ...], ...], Tuple[int, ...]]:
    l2 = tuple(b // c[0] for b, c in zip(bounds, chains))
    l1 = tuple(t // c[1] for t, c in zip(l2, chains))
    par = tuple(c[3] for c in chains)
    return (tuple(bounds), l2, l1), par


def _level_needs(ctx: MapSpaceCtx, l2_tile, shard) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    kind = ctx.kind
    need_l2 = tuple(ctx.banks_needed("L2", tile_footprint(kind, t, l2_tile)) for t in kind.tensors)
    need_l1 = tuple(ctx.banks_needed("L1", tile_footprint(kind, t, shard)) for t in kind.tensors)
    return need_l2, need_l1


def is_member(ctx: MapSpaceCtx, m: Mapping) -> bool:
    n = len(ctx.bounds)
    n_tensors = len(ctx.kind.tensors)
    try:
        if len(m.tiles) != 3 or any(len(row) != n for row in m.tiles) or len(m.par) != n:
            return False
        if len(m.order) != 3 or len(m.banks) != 2 or any(len(row) != n_tensors for row in m.banks):
            return False
        if tuple(m.tiles[0]) != ctx.bounds:
            return False
        for d in range(n):
            dram, l2, l1, par = m.tiles[0][d], m.tiles[1][d], m.tiles[2][d], m.par[d]
            if min(l2, l1, par) < 1 or dram % l2 or l2 % l1 or l1 % par:
                return False
        if math.prod(m.par) > ctx.accel.num_pes:
            return False
        if any(sorted(perm) != list(range(n)) for perm in m.order):
            return False
        for level, row in zip(ONCHIP_LEVELS, m.banks):
            if any(k < 0 for k in row) or sum(row) > ctx.accel.num_banks(level):
                return False
        need_l2, need_l1 = _level_needs(ctx, m.tiles[1], m.shard())
        return (all(k >= need for k, need in zip(m.banks[0], need_l2))
                and all(k >= need for k, need in zip(m.banks[1], need_l1)))
    except (TypeError, ValueError):
        return False


def _random_banks(rng: np.random.Generator, banks: int, parts: int) -> Tuple[int, ...]:
    # uniform over {k >= 0 : sum(k) <= banks} via stars and bars
    cuts = np.sort(rng.choice(banks + parts, size=parts, replace=False))
    out, prev = [], -1
    for c in cuts:
        out.append(int(c - prev - 1))
        prev = c
    return tuple(out)


def _random_order(rng: np.random.Generator, n: int) -> Tuple[int, ...]:
    return tuple(int(d) for d in rng.permutation(n))


def get_mapping(ctx: MapSpaceCtx, rng_seed: RngLike = None) -> Mapping:
    """Uniformly random valid mapping: every attribute is drawn uniformly from its
    structural domain and the draw is rejected unless it fits the accelerator."""
    if ctx.is_empty():
        raise EmptyMapSpaceError(f"No valid mapping of {ctx.problem.label} fits the accelerator")
    rng = as_generator(rng_seed)
    n_tensors = len(ctx.kind.tensors)
    for _ in range(MAX_DRAWS):
        chains = [c[rng.integers(len(c))] for c in ctx.chains]
        if math.prod(c[3] for c in chains) > ctx.accel.num_pes:
            continue
        tiles, par = _tiles_from_chains(ctx.bounds, chains)
        banks = tuple(_random_banks(rng, ctx.accel.num_banks(level), n_tensors) for level in ONCHIP_LEVELS)
        shard = tuple(t // p for t, p in zip(tiles[2], par))
        need_l2, need_l1 = _level_needs(ctx, tiles[1], shard)
        if any(k < need for k, need in zip(banks[0], need_l2)):
            continue
        if any(k < need for k, need in zip(banks[1], need_l1)):
            continue
        order = tuple(_random_order(rng, len(ctx.bounds)) for _ in LEVELS)
        return Mapping(tiles, par, order, banks)
    raise EmptyMapSpaceError(f"No valid mapping of {ctx.problem.label} found in {MAX_DRAWS} draws")


def order_scores(perm: Sequence[int]) -> List[float]:
    n = len(perm)
    scores = [0.0] * n
    for pos, d in enumerate(perm):
        scores[d] = float(n - 1 - pos)
    return scores


def order_from_scores(scores: Sequence[float]) -> Tuple[int, ...]:
    scores = np.nan_to_num(np.asarray(scores, dtype=float), nan=0.0)
    return tuple(sorted(range(len(scores)), key=lambda d: (-scores[d], d)))


def encode(ctx: MapSpaceCtx, m: Mapping) -> np.ndarray:
    layout = ctx.layout
    v = np.zeros(layout.length)
    v[:layout.n_pid] = ctx.problem.dims
    for d in range(layout.n_dims):
        v[layout.factor_index(0, d)] = m.tiles[0][d] / m.tiles[1][d]
        v[layout.factor_index(1, d)] = m.tiles[1][d] / m.tiles[2][d]
        v[layout.factor_index(2, d)] = m.tiles[2][d] / m.par[d]
        v[layout.par_index(d)] = m.par[d]
    for level in range(3):
        v[layout.score_slice(level)] = order_scores(m.order[level])
    for i, level in enumerate(ONCHIP_LEVELS):
        v[layout.alloc_slice(i)] = np.asarray(m.banks[i]) / ctx.accel.num_banks(level)
    return v


def _check_length(ctx: MapSpaceCtx, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (ctx.layout.length,):
        raise SchemaError(f"{ctx.kind.value} vectors have {ctx.layout.length} entries, got {v.shape}")
    return v


def decode(ctx: MapSpaceCtx, v) -> Mapping:
    """Structured read-back; the result may be invalid and callers must project."""
    v = _check_length(ctx, v)
    layout = ctx.layout

    def whole(x):
        return max(1, int(round(float(np.nan_to_num(x, nan=1.0)))))

    par = tuple(whole(v[layout.par_index(d)]) for d in range(layout.n_dims))
    l1 = tuple(p * whole(v[layout.factor_index(2, d)]) for d, p in enumerate(par))
    l2 = tuple(t * whole(v[layout.factor_index(1, d)]) for d, t in enumerate(l1))
    dram = tuple(t * whole(v[layout.factor_index(0, d)]) for d, t in enumerate(l2))
    order = tuple(order_from_scores(v[layout.score_slice(level)]) for level in range(3))
    banks = tuple(
        tuple(int(round(float(a) * ctx.accel.num_banks(level)))
              for a in np.clip(np.nan_to_num(v[layout.alloc_slice(i)], nan=0.0), 0.0, 1.0))
        for i, level in enumerate(ONCHIP_LEVELS))
    return Mapping((dram, l2, l1), par, order, banks)


def _clamp_parallelism(ctx: MapSpaceCtx, par: List[int]) -> None:
    while math.prod(par) > ctx.accel.num_pes:
        d = max(range(len(par)), key=lambda i: (par[i], -i))
        par[d] = max(x for x in divisors(ctx.bounds[d]) if x < par[d])


def _nearest_chain(ctx: MapSpaceCtx, v: np.ndarray, d: int, par: int) -> Tuple[int, int]:
    """(L2, L1) tiles of dim d whose three level factors are jointly closest to
    v in summed log distance, among chains ending in `par`."""
    b = ctx.bounds[d]
    target = np.array([log_target(v[ctx.layout.factor_index(level, d)], b) for level in range(3)])
    table = ctx.chain_tables[d]
    rows = table[table[:, 3] == par]
    dist = np.abs(np.log(rows[:, :3]) - target).sum(axis=1)
    best = rows[int(np.argmin(dist))]
    l2 = b // int(best[0])
    return l2, l2 // int(best[1])


def _round_banks(ctx: MapSpaceCtx, values: np.ndarray, level: str) -> List[int]:
    a = np.clip(np.nan_to_num(values, nan=0.0), 0.0, 1.0)
    total = float(a.sum())
    if total > 1.0:
        a = a / total
    nb = ctx.accel.num_banks(level)
    return [int(math.floor(x * nb + 1e-9)) for x in a]


def _rebalance(banks: List[int], need: Sequence[int], total: int) -> None:
    """Raise every allocation to its need, taking spare banks first and then the
    largest surpluses. Requires sum(need) <= total."""
    spare = total - sum(banks)
    for t, want in enumerate(need):
        while banks[t] < want:
            if spare > 0:
                give = min(spare, want - banks[t])
                banks[t] += give
                spare -= give
                continue
            donor = max((i for i in range(len(banks)) if banks[i] > need[i]),
                        key=lambda i: (banks[i] - need[i], -i))
            banks[donor] -= 1
            banks[t] += 1


def _shrink_for(ctx: MapSpaceCtx, level: str, tensor: int, l2: List[int], l1: List[int], par: List[int]) -> bool:
    """Shrink the tensor's largest relevant tile at `level` by one divisor step."""
    if level == "L2":
        candidates = [d for d in ctx.relevant[tensor] if l2[d] > 1]
        if not candidates:
            return False
        d = max(candidates, key=lambda i: (l2[i], -i))
        l2[d] = max(x for x in divisors(ctx.bounds[d]) if x < l2[d])
        l1[d] = math.gcd(l1[d], l2[d])
        par[d] = math.gcd(par[d], l1[d])
        return True
    candidates = [d for d in ctx.relevant[tensor] if l1[d] // par[d] > 1]
    if not candidates:
        return False
    d = max(candidates, key=lambda i: (l1[i] // par[i], -i))
    l1[d] = max(x for x in divisors(l2[d]) if x < l1[d] and x % par[d] == 0)
    return True


def get_projection(ctx: MapSpaceCtx, v) -> Mapping:
    """Project an arbitrary vector onto the map space, attribute by attribute.

    Parallel degrees round to divisors of the loop bound and are clamped
    largest-first to the PE count. Each dim then takes the factorization chain
    ending in its parallel degree whose level factors are nearest in summed log
    distance, so the divisibility chain holds by construction. Orders argsort,
    allocations clamp, renormalize and round down to whole banks, and finally
    each level is repaired until every tensor's tile fits its banks.
    """
    v = _check_length(ctx, v)
    if ctx.is_empty():
        raise EmptyMapSpaceError(f"No valid mapping of {ctx.problem.label} fits the accelerator")
    layout = ctx.layout
    bounds = ctx.bounds
    par = [nearest_divisor(b, v[layout.par_index(d)]) for d, b in enumerate(bounds)]
    _clamp_parallelism(ctx, par)
    l2, l1 = [], []
    for d in range(len(bounds)):
        t2, t1 = _nearest_chain(ctx, v, d, par[d])
        l2.append(t2)
        l1.append(t1)
    order = tuple(order_from_scores(v[layout.score_slice(level)]) for level in range(3))

    banks = [_round_banks(ctx, v[layout.alloc_slice(i)], level) for i, level in enumerate(ONCHIP_LEVELS)]
    for i, level in enumerate(ONCHIP_LEVELS):
        total = ctx.accel.num_banks(level)
        while True:
            tile = l2 if level == "L2" else [t // p for t, p in zip(l1, par)]
            need = [ctx.banks_needed(level, tile_footprint(ctx.kind, t, tile)) for t in ctx.kind.tensors]
            if sum(need) <= total:
                _rebalance(banks[i], need, total)
                break
            worst = max(range(len(need)), key=lambda t: (need[t], -t))
            if not _shrink_for(ctx, level, worst, l2, l1, par):
                raise EmptyMapSpaceError(f"Cannot fit {ctx.problem.label} at {level}")

    return Mapping((tuple(bounds), tuple(l2), tuple(l1)), tuple(par), order,
                   tuple(tuple(row) for row in banks))


def neighbor(ctx: MapSpaceCtx, m: Mapping, rng: np.random.Generator) -> Mapping:
    """Resample one attribute group (the tiling chain of a dim at its current
    parallel degree, a parallel degree, an order swap or an allocation cell) and
    project back onto the space."""
    layout = ctx.layout
    v = encode(ctx, m)
    n = layout.n_dims
    move = int(rng.integers(4))
    d = int(rng.integers(n))
    if move == 0:
        table = ctx.chain_tables[d]
        rows = table[table[:, 3] == m.par[d]]
        row = rows[rng.integers(len(rows))]
        for level in range(3):
            v[layout.factor_index(level, d)] = row[level]
    elif move == 1:
        options = divisors(m.tiles[2][d])
        p = options[rng.integers(len(options))]
        v[layout.par_index(d)] = p
        v[layout.factor_index(2, d)] = m.tiles[2][d] / p
    elif move == 2:
        level = int(rng.integers(3))
        perm = list(m.order[level])
        if n > 1:
            a, b = rng.choice(n, size=2, replace=False)
            perm[a], perm[b] = perm[b], perm[a]
        v[layout.score_slice(level)] = order_scores(perm)
    else:
        i = int(rng.integers(2))
        nb = ctx.accel.num_banks(ONCHIP_LEVELS[i])
        t = int(rng.integers(layout.n_tensors))
        v[layout.alloc_slice(i).start + t] = rng.integers(nb + 1) / nb
    return get_projection(ctx, v)


@dataclass(frozen=True)
class SpaceSize:
    count: Optional[int]  # exact count, None when only estimated
    log10: float
    exact: bool
    placements: Optional[int] = None  # count with loop orders ignored


def _bank_options(ctx: MapSpaceCtx, level: str, need: Sequence[int]) -> int:
    return count_compositions(ctx.accel.num_banks(level) - sum(need), len(need))


def space_size(ctx: MapSpaceCtx, cap: int = 10 ** 7) -> SpaceSize:
    """Exact count when the tiling chains can be enumerated under `cap`, else the
    product-form upper bound that ignores the PE and capacity constraints."""
    n = len(ctx.bounds)
    n_tensors = len(ctx.kind.tensors)
    orders = math.factorial(n) ** 3
    chain_combos = math.prod(len(c) for c in ctx.chains)
    if chain_combos > cap:
        bound = chain_combos * orders
        for level in ONCHIP_LEVELS:
            bound *= count_compositions(ctx.accel.num_banks(level), n_tensors)
        logger.info(f"Map space of {ctx.problem.label} too large to enumerate, estimating")
        return SpaceSize(None, math.log10(bound), False)
    count = 0
    if not ctx.is_empty():
        for chains in itertools.product(*ctx.chains):
            if math.prod(c[3] for c in chains) > ctx.accel.num_pes:
                continue
            tiles, par = _tiles_from_chains(ctx.bounds, chains)
            need_l2, need_l1 = _level_needs(ctx, tiles[1], tuple(t // p for t, p in zip(tiles[2], par)))
            count += _bank_options(ctx, "L2", need_l2) * _bank_options(ctx, "L1", need_l1)
    placements, count = count, count * orders
    return SpaceSize(count, math.log10(count) if count else float("-inf"), True, placements)


def _bank_vectors(total: int, need: Sequence[int]) -> Iterator[Tuple[int, ...]]:
    spare = total - sum(need)
    if spare < 0:
        return
    for extra in itertools.product(range(spare + 1), repeat=len(need)):
        if sum(extra) <= spare:
            yield tuple(n + e for n, e in zip(need, extra))


def enumerate_mappings(ctx: MapSpaceCtx, cap: int = 10 ** 5) -> Iterator[Mapping]:
    """Every valid mapping of a small space, in a fixed order."""
    size = space_size(ctx)
    if not size.exact or size.count > cap:
        raise EmptyMapSpaceError(
            f"Map space of {ctx.problem.label} has ~10^{size.log10:.1f} mappings, above cap {cap}")
    if ctx.is_empty():
        return
    perms = list(itertools.permutations(range(len(ctx.bounds))))
    for chains in itertools.product(*ctx.chains):
        if math.prod(c[3] for c in chains) > ctx.accel.num_pes:
            continue
        tiles, par = _tiles_from_chains(ctx.bounds, chains)
        need_l2, need_l1 = _level_needs(ctx, tiles[1], tuple(t // p for t, p in zip(tiles[2], par)))
        for b2 in _bank_vectors(ctx.accel.num_banks("L2"), need_l2):
            for b1 in _bank_vectors(ctx.accel.num_banks("L1"), need_l1):
                for order in itertools.product(perms, repeat=3):
                    yield Mapping(tiles, par, order, (b2, b1))


def format_mapping(problem: Problem, m: Mapping) -> str:
    names = problem.kind.dims

    def ints(row):
        return ",".join(str(x) for x in row)

    lines = [RECORD_HEADER, f"kind={problem.kind.value}", f"dims={ints(problem.dims)}"]
    for level, row in zip(LEVELS, m.tiles):
        lines.append(f"tile.{level}={ints(row)}")
    lines.append(f"par={ints(m.par)}")
    for level, perm in zip(LEVELS, m.order):
        lines.append(f"order.{level}=" + ",".join(names[d] for d in perm))
    for level, row in zip(ONCHIP_LEVELS, m.banks):
        lines.append(f"banks.{level}={ints(row)}")
    return "\n".join(lines) + "\n"


def parse_mapping(text: str) -> Tuple[Problem, Mapping]:
    lines = [line.strip() for line in text.strip().splitlines() if line.strip()]
    if not lines or lines[0] != RECORD_HEADER:
        raise SchemaError(f"Mapping record must start with {RECORD_HEADER!r}")
    values = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise SchemaError(f"Malformed mapping record line: {line!r}")
        values[key.strip()] = value.strip()
    try:
        kind = AlgorithmKind.parse(values["kind"])
        problem = Problem(kind, tuple(int(x) for x in values["dims"].split(",")))
        tiles = tuple(tuple(int(x) for x in values[f"tile.{level}"].split(",")) for level in LEVELS)
        par = tuple(int(x) for x in values["par"].split(","))
        order = tuple(tuple(kind.dims.index(x.strip()) for x in values[f"order.{level}"].split(","))
                      for level in LEVELS)
        banks = tuple(tuple(int(x) for x in values[f"banks.{level}"].split(",")) for level in ONCHIP_LEVELS)
    except KeyError as e:
        raise SchemaError(f"Mapping record is missing {e}")
    except ValueError as e:
        raise SchemaError(f"Malformed mapping record: {e}")
    return problem, Mapping(tiles, par, order, banks)
