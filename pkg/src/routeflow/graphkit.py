"""k-nearest-neighbor sparsification and GNN input features.

Directed edges: every node keeps min(k, n-1) outgoing neighbors sorted by
ascending distance (exact ties broken by ascending node index).  For CVRP the
depot is force-included in every customer's list so a return-to-depot action
always has a real edge; the farthest neighbor is dropped to make room.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConsistencyError, ParameterError
from .instances import CVRP, DistanceOracle, VrpInstance


def default_k(n_nodes: int) -> int:
    """Default sparsity: one fifth of the node count, floor 5."""
    return max(5, n_nodes // 5)


@dataclass
class SparseGraph:
    n: int
    degree: int
    neighbors: np.ndarray       # (n, degree) int64, per-row sorted by (dist, index)
    edge_index: np.ndarray      # (n*degree, 2) int64 rows (src, dst), row-major by src
    edge_dist: np.ndarray       # (n*degree,) float64
    _slot_cache: list[dict[int, int] | None] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._slot_cache:
            self._slot_cache = [None] * self.n

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[0]

    def neighbor_lists(self) -> list[list[int]]:
        return [list(map(int, row)) for row in self.neighbors]

    def out_slots(self, u: int) -> range:
        """Edge slots of node u's outgoing edges, in neighbor-list order."""
        return range(u * self.degree, (u + 1) * self.degree)

    def slot(self, u: int, v: int) -> int:
        """Edge slot for (u -> v), or -1 if v is not a neighbor of u."""
        cache = self._slot_cache[u]
        if cache is None:
            cache = {int(dst): u * self.degree + p for p, dst in enumerate(self.neighbors[u])}
            self._slot_cache[u] = cache
        return cache.get(int(v), -1)


def knn_sparsify(instance: VrpInstance, k: int | None = None) -> SparseGraph:
    if k is None:
        k = default_k(instance.n_nodes)
    if k < 1:
        raise ParameterError("k must be at least 1")
    n = instance.n_nodes
    deg = min(k, n - 1)
    if deg < 1:
        raise ParameterError("graph needs at least 2 nodes")
    oracle = DistanceOracle(instance)
    depot = instance.depot
    neighbors = np.empty((n, deg), dtype=np.int64)
    dists = np.empty((n, deg), dtype=np.float64)
    idx_all = np.arange(n)
    for u in range(n):
        row = oracle.row(u)
        cand = idx_all[idx_all != u]
        cand_d = row[cand]
        order = np.lexsort((cand, cand_d))[:deg]
        chosen = cand[order]
        chosen_d = cand_d[order]
        if instance.kind == CVRP and u != depot and depot not in chosen:
            chosen[-1] = depot
            chosen_d[-1] = row[depot]
            reorder = np.lexsort((chosen, chosen_d))
            chosen, chosen_d = chosen[reorder], chosen_d[reorder]
        neighbors[u] = chosen
        dists[u] = chosen_d
    src = np.repeat(idx_all, deg)
    dst = neighbors.reshape(-1)
    edge_index = np.stack([src, dst], axis=1)
    return SparseGraph(
        n=n, degree=deg, neighbors=neighbors,
        edge_index=edge_index, edge_dist=dists.reshape(-1),
    )


@dataclass
class FeatureSet:
    node_feats: np.ndarray  # (n, 4): x, y, demand/C (0 for tsp), is_depot
    edge_feats: np.ndarray  # (E, 1): distance

    @property
    def node_dim(self) -> int:
        return self.node_feats.shape[1]

    @property
    def edge_dim(self) -> int:
        return self.edge_feats.shape[1]


def build_features(instance: VrpInstance, graph: SparseGraph) -> FeatureSet:
    """Raw node features (x, y, normalized demand, depot flag) and edge distances."""
    n = instance.n_nodes
    if graph.n != n:
        raise ConsistencyError(f"graph has {graph.n} nodes, instance has {n}")
    u0, v0 = map(int, graph.edge_index[0])
    d = instance.coords[u0] - instance.coords[v0]
    if abs(float(np.hypot(d[0], d[1])) - float(graph.edge_dist[0])) > 1e-9:
        raise ConsistencyError("graph edge distances do not match instance coordinates")
    node_feats = np.zeros((n, 4))
    node_feats[:, 0:2] = instance.coords
    if instance.kind == CVRP:
        node_feats[:, 2] = instance.demands / float(instance.capacity)
        node_feats[instance.depot, 3] = 1.0
    return FeatureSet(node_feats=node_feats, edge_feats=graph.edge_dist[:, None].copy())


def relabel_instance(instance: VrpInstance, perm: np.ndarray) -> VrpInstance:
    """Instance with node i renamed to perm[i] (test helper for equivariance)."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    coords = instance.coords[inv]
    demands = instance.demands[inv] if instance.demands.size else instance.demands
    depot = int(perm[instance.depot]) if instance.kind == CVRP else 0
    return VrpInstance(
        name=instance.name + "-perm", kind=instance.kind, coords=coords,
        demands=demands, capacity=instance.capacity, depot=depot,
    )
