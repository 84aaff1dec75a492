"""Problem instances: synthetic generators, TSPLIB/CVRPLib parsing, distances.

A VrpInstance is immutable after construction (coordinate and demand arrays
are marked read-only) and safe to share across threads.  Node 0 is the depot
for generated CVRP instances; parsed files keep the depot declared in their
DEPOT_SECTION, remapped to 0-based indexing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, ParameterError, ParseError, UnsupportedFormatError
from .rng import RandomStream

CVRP = "cvrp"
TSP = "tsp"


@dataclass(eq=False)
class VrpInstance:
    """One routing problem: coordinates, demands, capacity, depot index.

    kind is "cvrp" (depot + customers, integer demands, vehicle capacity) or
    "tsp" (plain node set, no demands or capacity).
    """

    name: str
    kind: str
    coords: np.ndarray          # (n_nodes, 2) float64
    demands: np.ndarray         # (n_nodes,) int64 for cvrp, empty for tsp
    capacity: int | None
    depot: int = 0

    def __post_init__(self):
        self.coords = np.ascontiguousarray(np.asarray(self.coords, dtype=np.float64))
        self.demands = np.asarray(self.demands, dtype=np.int64)
        if self.kind not in (CVRP, TSP):
            raise ParameterError(f"unknown instance kind {self.kind!r}")
        if self.coords.ndim != 2 or self.coords.shape[1] != 2 or self.coords.shape[0] < 1:
            raise ParameterError("coords must be a non-empty (n, 2) array")
        n = self.coords.shape[0]
        if self.kind == CVRP:
            if self.capacity is None or int(self.capacity) < 1:
                raise ParameterError("cvrp instance needs a positive capacity")
            self.capacity = int(self.capacity)
            if self.demands.shape != (n,):
                raise ConsistencyError(f"expected {n} demands, got {self.demands.shape}")
            if not (0 <= self.depot < n):
                raise ParameterError(f"depot index {self.depot} out of range")
            if self.demands[self.depot] != 0:
                raise ConsistencyError("depot demand must be 0")
            customer_demands = np.delete(self.demands, self.depot)
            if customer_demands.size and (customer_demands.min() < 1 or customer_demands.max() > self.capacity):
                raise ConsistencyError("customer demands must lie in [1, capacity]")
        else:
            if self.demands.size:
                raise ConsistencyError("tsp instance must not carry demands")
            if self.capacity is not None:
                raise ConsistencyError("tsp instance must not carry a capacity")
        self.coords.setflags(write=False)
        self.demands.setflags(write=False)

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n_customers(self) -> int:
        return self.n_nodes - 1 if self.kind == CVRP else self.n_nodes

    def customers(self) -> list[int]:
        if self.kind == TSP:
            return list(range(self.n_nodes))
        return [i for i in range(self.n_nodes) if i != self.depot]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VrpInstance):
            return NotImplemented
        return (
            self.name == other.name
            and self.kind == other.kind
            and self.capacity == other.capacity
            and self.depot == other.depot
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.demands, other.demands)
        )

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "coords": [[float(x), float(y)] for x, y in self.coords],
            "demands": [int(d) for d in self.demands],
            "capacity": None if self.capacity is None else int(self.capacity),
            "depot": int(self.depot),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json_dict(cls, obj: dict) -> "VrpInstance":
        try:
            return cls(
                name=str(obj["name"]),
                kind=str(obj["kind"]),
                coords=np.asarray(obj["coords"], dtype=np.float64),
                demands=np.asarray(obj["demands"], dtype=np.int64),
                capacity=obj["capacity"],
                depot=int(obj["depot"]),
            )
        except KeyError as exc:
            raise ParseError(f"instance JSON missing field {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "VrpInstance":
        return cls.from_json_dict(json.loads(text))


def generate_cvrp(
    n: int,
    seed: int,
    capacity: int = 50,
    demand_lo: int = 1,
    demand_hi: int = 9,
) -> VrpInstance:
    """Depot + n customers uniform on the unit square, integer demands in [lo, hi].

    Output is a pure function of the arguments (Philox stream keyed by them).
    """
    if n < 1:
        raise ParameterError("need at least one customer")
    if not (1 <= demand_lo <= demand_hi <= capacity):
        raise ParameterError(
            f"invalid demand range [{demand_lo}, {demand_hi}] for capacity {capacity}"
        )
    gen = RandomStream(seed).child("instance", "cvrp", n).generator()
    coords = gen.random((n + 1, 2))
    demands = np.zeros(n + 1, dtype=np.int64)
    demands[1:] = gen.integers(demand_lo, demand_hi + 1, size=n)
    return VrpInstance(
        name=f"cvrp{n}-s{seed}",
        kind=CVRP,
        coords=coords,
        demands=demands,
        capacity=capacity,
        depot=0,
    )


def generate_tsp(n: int, seed: int) -> VrpInstance:
    """n nodes uniform on the unit square."""
    if n < 2:
        raise ParameterError("tsp needs at least two nodes")
    gen = RandomStream(seed).child("instance", "tsp", n).generator()
    coords = gen.random((n, 2))
    return VrpInstance(
        name=f"tsp{n}-s{seed}", kind=TSP, coords=coords, demands=np.empty(0, dtype=np.int64),
        capacity=None, depot=0,
    )


def distance(instance: VrpInstance, i: int, j: int) -> float:
    """Euclidean distance between nodes i and j."""
    n = instance.n_nodes
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"node index out of range: ({i}, {j}) with {n} nodes")
    d = instance.coords[i] - instance.coords[j]
    return float(math.hypot(d[0], d[1]))


# Above this node count no full distance matrix is materialized; rows are
# computed on demand (CVRPLib-XXL files reach 15k+ nodes).
_MATRIX_LIMIT = 2000


class DistanceOracle:
    """Symmetric Euclidean distance lookups for one instance.

    Precomputes the full matrix for small instances, computes rows on demand
    above _MATRIX_LIMIT nodes.
    """

    def __init__(self, instance: VrpInstance):
        self.instance = instance
        self._coords = instance.coords
        n = instance.n_nodes
        if n <= _MATRIX_LIMIT:
            diff = self._coords[:, None, :] - self._coords[None, :, :]
            self._matrix = np.sqrt((diff * diff).sum(axis=2))
        else:
            self._matrix = None

    def distance(self, i: int, j: int) -> float:
        if self._matrix is not None:
            return float(self._matrix[i, j])
        return distance(self.instance, i, j)

    __call__ = distance

    def row(self, i: int) -> np.ndarray:
        """Distances from node i to every node."""
        if self._matrix is not None:
            return self._matrix[i]
        diff = self._coords - self._coords[i]
        return np.sqrt((diff * diff).sum(axis=1))


# ---------------------------------------------------------------------------
# TSPLIB / CVRPLib text format
# ---------------------------------------------------------------------------

_HEADER_KEYS = {
    "NAME", "TYPE", "COMMENT", "DIMENSION", "EDGE_WEIGHT_TYPE", "CAPACITY",
    "NODE_COORD_TYPE", "DISPLAY_DATA_TYPE",
}


def parse_tsplib(text: str | bytes, normalize: bool = False) -> VrpInstance:
    """Parse a TSPLIB/CVRPLib file (EUC_2D only).

    1-based file indices become 0-based node indices.  The depot is the first
    DEPOT_SECTION entry.  Coordinates are kept in native scale unless
    normalize=True, which rescales them into the unit square (common shift,
    common scale, aspect preserved).
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    headers: dict[str, str] = {}
    sections: dict[str, list[str]] = {}
    current_section: str | None = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        key = line.split(":", 1)[0].strip().upper() if ":" in line else line.upper()
        if key in _HEADER_KEYS and ":" in line:
            headers[key] = line.split(":", 1)[1].strip()
            current_section = None
            continue
        if line.upper().endswith("_SECTION"):
            current_section = line.upper().split()[0]
            sections[current_section] = []
            continue
        if current_section is not None:
            sections[current_section].append(line)

    for required in ("NAME", "TYPE", "DIMENSION"):
        if required not in headers:
            raise ParseError(f"missing mandatory header {required}")
    kind_raw = headers["TYPE"].upper()
    if kind_raw == "TSP":
        kind = TSP
    elif kind_raw in ("CVRP", "VRP"):
        kind = CVRP
    else:
        raise UnsupportedFormatError(f"unsupported TYPE {headers['TYPE']!r}")

    edge_weight = headers.get("EDGE_WEIGHT_TYPE", "").upper()
    if edge_weight != "EUC_2D":
        raise UnsupportedFormatError(
            f"only EDGE_WEIGHT_TYPE EUC_2D is supported, got {edge_weight or 'none'!r}"
        )
    try:
        dimension = int(headers["DIMENSION"])
    except ValueError as exc:
        raise ParseError(f"bad DIMENSION {headers['DIMENSION']!r}") from exc
    if dimension < 1:
        raise ParseError("DIMENSION must be positive")

    if "NODE_COORD_SECTION" not in sections:
        raise ParseError("missing mandatory section NODE_COORD_SECTION")
    coords = np.full((dimension, 2), np.nan)
    for line in sections["NODE_COORD_SECTION"]:
        parts = line.split()
        if len(parts) < 3:
            raise ParseError(f"bad NODE_COORD_SECTION line {line!r}")
        idx = int(parts[0]) - 1
        if not (0 <= idx < dimension):
            raise ParseError(f"node index {idx + 1} outside DIMENSION {dimension}")
        coords[idx] = (float(parts[1]), float(parts[2]))
    if np.isnan(coords).any():
        raise ParseError("NODE_COORD_SECTION does not cover every node")

    if kind == TSP:
        demands = np.empty(0, dtype=np.int64)
        capacity = None
        depot = 0
    else:
        if "CAPACITY" not in headers:
            raise ParseError("missing mandatory header CAPACITY")
        capacity = int(headers["CAPACITY"])
        if "DEMAND_SECTION" not in sections:
            raise ParseError("missing mandatory section DEMAND_SECTION")
        if "DEPOT_SECTION" not in sections:
            raise ParseError("missing mandatory section DEPOT_SECTION")
        entries = []
        for line in sections["DEMAND_SECTION"]:
            parts = line.split()
            if len(parts) < 2:
                raise ParseError(f"bad DEMAND_SECTION line {line!r}")
            entries.append((int(parts[0]) - 1, int(parts[1])))
        if len(entries) != dimension:
            raise ConsistencyError(
                f"DEMAND_SECTION has {len(entries)} entries for DIMENSION {dimension}"
            )
        demands = np.zeros(dimension, dtype=np.int64)
        for idx, dem in entries:
            if not (0 <= idx < dimension):
                raise ParseError(f"demand index {idx + 1} outside DIMENSION")
            demands[idx] = dem
        depot_entries = [int(tok) for line in sections["DEPOT_SECTION"] for tok in line.split()]
        depot_entries = [d for d in depot_entries if d != -1]
        if not depot_entries:
            raise ParseError("DEPOT_SECTION lists no depot")
        depot = depot_entries[0] - 1
        if not (0 <= depot < dimension):
            raise ParseError(f"depot index {depot + 1} outside DIMENSION")
        if demands[depot] != 0:
            raise ConsistencyError("depot demand must be 0")
        others = np.delete(demands, depot)
        if others.size and others.max() > capacity:
            raise ConsistencyError(
                f"demand {int(others.max())} exceeds capacity {capacity}"
            )
        if others.size and others.min() < 1:
            raise ConsistencyError("customer demands must be at least 1")

    if normalize:
        lo = coords.min(axis=0)
        extent = float((coords - lo).max())
        if extent > 0:
            coords = (coords - lo) / extent
        else:
            coords = coords - lo

    return VrpInstance(
        name=headers["NAME"], kind=kind, coords=coords, demands=demands,
        capacity=capacity, depot=depot,
    )


# ---------------------------------------------------------------------------
# Dataset files (JSON interchange)
# ---------------------------------------------------------------------------

def dataset_to_json(instances: list[VrpInstance]) -> str:
    return json.dumps(
        {"instances": [inst.to_json_dict() for inst in instances]}, sort_keys=True
    )


def dataset_from_json(text: str) -> list[VrpInstance]:
    obj = json.loads(text)
    if not isinstance(obj, dict) or "instances" not in obj:
        raise ParseError("dataset JSON must be an object with an 'instances' list")
    return [VrpInstance.from_json_dict(d) for d in obj["instances"]]
