import hashlib
import math
from dataclasses import dataclass, fields
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from mapsearch.errors import ConfigError, InvalidProblemError, SchemaError

# Memory hierarchy, outermost first. Only the on-chip levels are banked.
LEVELS = ("DRAM", "L2", "L1")
ONCHIP_LEVELS = ("L2", "L1")


class AlgorithmKind(str, Enum):
    CONV1D = "conv1d"
    CONV = "conv"
    MTTKRP = "mttkrp"

    @property
    def dims(self) -> Tuple[str, ...]:
        return _KIND_DIMS[self]

    @property
    def tensors(self) -> Tuple[str, ...]:
        return _KIND_TENSORS[self]

    @classmethod
    def parse(cls, text: str) -> "AlgorithmKind":
        key = text.strip().lower().replace("-", "").replace("_", "")
        aliases = {"conv1d": cls.CONV1D, "conv": cls.CONV, "convlayer": cls.CONV,
                   "cnn": cls.CONV, "cnnlayer": cls.CONV, "mttkrp": cls.MTTKRP}
        if key not in aliases:
            raise InvalidProblemError(f"Unknown algorithm kind: {text!r}")
        return aliases[key]


_KIND_DIMS = {
    AlgorithmKind.CONV1D: ("W", "R"),
    AlgorithmKind.CONV: ("N", "K", "C", "H", "W", "R", "S"),
    AlgorithmKind.MTTKRP: ("I", "J", "K", "L"),
}

# The output tensor is always named "O".
_KIND_TENSORS = {
    AlgorithmKind.CONV1D: ("I", "O", "F"),
    AlgorithmKind.CONV: ("I", "O", "F"),
    AlgorithmKind.MTTKRP: ("A", "B", "C", "O"),
}


@dataclass(frozen=True)
class Problem:
    kind: AlgorithmKind
    dims: Tuple[int, ...]  # the problem id, in kind.dims order

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        names = self.kind.dims
        if len(self.dims) != len(names):
            raise InvalidProblemError(
                f"{self.kind.value} expects {len(names)} dims {names}, got {len(self.dims)}")
        if any(d < 1 for d in self.dims):
            raise InvalidProblemError(f"All dims must be >= 1, got {self.dims}")
        if self.kind is not AlgorithmKind.MTTKRP:
            if self.dim("R") > self.dim("W"):
                raise InvalidProblemError(f"R must not exceed W: {self.dims}")
            if self.kind is AlgorithmKind.CONV and self.dim("S") > self.dim("H"):
                raise InvalidProblemError(f"S must not exceed H: {self.dims}")

    def dim(self, name: str) -> int:
        return self.dims[self.kind.dims.index(name)]

    @property
    def label(self) -> str:
        return f"{self.kind.value}:" + "x".join(str(d) for d in self.dims)


@dataclass(frozen=True)
class AcceleratorConfig:
    num_pes: int = 16
    flops_per_pe: int = 1  # MACs per cycle
    clock_hz: float = 1e9
    l2_capacity: int = 4096  # words
    l1_capacity: int = 256  # words, private to each PE
    l2_banks: int = 8
    l1_banks: int = 4
    e_dram: float = 200.0  # pJ per word
    e_l2: float = 6.0
    e_l1: float = 1.0
    mac_energy: float = 0.5  # pJ per MAC

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"Accelerator field {f.name} must be positive, got {value!r}")
        if self.l2_capacity < self.l2_banks or self.l1_capacity < self.l1_banks:
            raise ConfigError("Every bank needs at least one word of capacity")

    def capacity(self, level: str) -> int:
        return {"L2": self.l2_capacity, "L1": self.l1_capacity}[level]

    def num_banks(self, level: str) -> int:
        return {"L2": self.l2_banks, "L1": self.l1_banks}[level]

    def energy_per_word(self, level: str) -> float:
        return {"DRAM": self.e_dram, "L2": self.e_l2, "L1": self.e_l1}[level]

    def fingerprint(self) -> str:
        listing = ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))
        return hashlib.sha256(listing.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Mapping:
    """One point of a map space.

    tiles[level][d] is the extent of dim d resident at LEVELS[level];
    par[d] splits the L1 tile across PEs; order[level] lists dim indices
    outermost first; banks[i][t] counts the banks of ONCHIP_LEVELS[i]
    given to tensor t (the allocation fraction is banks / num_banks).
    """
    tiles: Tuple[Tuple[int, ...], ...]
    par: Tuple[int, ...]
    order: Tuple[Tuple[int, ...], ...]
    banks: Tuple[Tuple[int, ...], ...]

    def shard(self) -> Tuple[int, ...]:
        return tuple(t // p for t, p in zip(self.tiles[2], self.par))

    def num_active_pes(self) -> int:
        return math.prod(self.par)


@dataclass(frozen=True)
class CostVector:
    kind: AlgorithmKind
    energy: Tuple[Tuple[float, ...], ...]  # [level][tensor], pJ
    energy_total: float
    cycles: float
    utilization: float
    clock_hz: float = 1e9

    @property
    def delay(self) -> float:
        return self.cycles / self.clock_hz

    @property
    def edp(self) -> float:
        return self.energy_total * self.delay

    def as_array(self) -> np.ndarray:
        flat = [e for row in self.energy for e in row]
        return np.array(flat + [self.energy_total, self.utilization, self.cycles], dtype=float)

    @classmethod
    def from_array(cls, kind: AlgorithmKind, values, clock_hz: float = 1e9) -> "CostVector":
        values = np.asarray(values, dtype=float)
        n_tensors = len(kind.tensors)
        width = len(LEVELS) * n_tensors + 3
        if values.shape != (width,):
            raise SchemaError(f"{kind.value} cost vector has {width} entries, got {values.shape}")
        energy = tuple(tuple(float(v) for v in values[i * n_tensors:(i + 1) * n_tensors])
                       for i in range(len(LEVELS)))
        return cls(kind, energy, float(values[-3]), float(values[-1]), float(values[-2]), clock_hz)


def cost_columns(kind: AlgorithmKind) -> Tuple[str, ...]:
    """CSV column names of a CostVector, in surrogate output order."""
    names = [f"energy_{level}_{t}" for level in LEVELS for t in kind.tensors]
    return tuple(names + ["energy_total", "utilization", "cycles"])


@dataclass(frozen=True)
class Objective:
    """Weighted sum over CostVector components, or EDP when weights is None."""
    weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
            if any(not math.isfinite(w) or w < 0 for w in self.weights):
                raise ConfigError(f"Objective weights must be finite and >= 0: {self.weights}")

    @property
    def is_edp(self) -> bool:
        return self.weights is None


EDP = Objective()
