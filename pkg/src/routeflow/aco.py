"""Pheromone-guided ant search over the learned edge distribution.

The policy's per-node edge softmax seeds the pheromone map; ants build
feasible tours with the same k-NN candidate rule as the sampler (a stated
assumption, not a claim about any reference setup), local search refines
them, and elite tours deposit pheromone.  Defaults follow common ACO
practice and are all configurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConsistencyError, InfeasibilityError, ParameterError
from .graphkit import SparseGraph
from .instances import CVRP, TSP, DistanceOracle, VrpInstance
from .network import PolicyNet, PolicyOutput
from .rng import RandomStream
from .sampler import StateRecord, Trajectory, _candidates, _Walk, check_trajectory
from . import sampler

TWO_OPT = "two_opt"
TWO_OPT_PLUS_RELOCATE = "two_opt_plus_relocate"

_DIST_FLOOR = 1e-12  # heuristic 1/d guard for coincident points


@dataclass
class PheromoneMap:
    tau: np.ndarray         # (E,) per directed sparse edge
    heuristic: np.ndarray   # (E,) 1/distance
    graph: SparseGraph
    alpha: float = 1.0
    beta_h: float = 2.0
    rho: float = 0.1
    tau_min: float = 1e-3
    tau_max: float = 10.0
    q: float = 1.0
    elite_count: int = 5

    def clipped(self, tau: np.ndarray) -> np.ndarray:
        return np.clip(tau, self.tau_min, self.tau_max)


def heuristic_to_pheromone(
    output: PolicyOutput, graph: SparseGraph, **params
) -> PheromoneMap:
    """Per-node softmax of edge logits, clipped into [tau_min, tau_max]."""
    logits = output.edge_logits.value
    if not np.isfinite(logits).all():
        raise ParameterError("edge logits must be finite")
    z = logits.reshape(graph.n, graph.degree)
    z = z - z.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    pm = PheromoneMap(
        tau=probs.reshape(-1),
        heuristic=1.0 / np.maximum(graph.edge_dist, _DIST_FLOOR),
        graph=graph,
        **params,
    )
    pm.tau = pm.clipped(pm.tau)
    return pm


def _ant_weights(pm: PheromoneMap, slots: list[int], vdists: list[float]) -> np.ndarray:
    w = np.empty(len(slots))
    for i, s in enumerate(slots):
        if s >= 0:
            w[i] = pm.tau[s] ** pm.alpha * pm.heuristic[s] ** pm.beta_h
        else:
            eta = 1.0 / max(vdists[0], _DIST_FLOOR)
            w[i] = pm.tau_min ** pm.alpha * eta ** pm.beta_h
    return w


def _ant_walk(
    pm: PheromoneMap, instance: VrpInstance, graph: SparseGraph,
    oracle: DistanceOracle, gen: np.random.Generator,
) -> Trajectory:
    if instance.kind == CVRP:
        start = instance.depot
    else:
        start = int(gen.integers(instance.n_nodes))
    walk = _Walk(instance, graph, oracle, start)
    depot = instance.depot

    def done() -> bool:
        if instance.kind == CVRP:
            return walk.n_unvisited == 0 and walk.current == depot
        return walk.n_unvisited == 0

    while not done():
        cand, slots, vdists = _candidates(
            instance, graph, oracle, walk.visited, walk.current, walk.remaining, walk.n_unvisited
        )
        if not cand:
            raise InfeasibilityError(f"ant stuck at node {walk.current}")
        w = _ant_weights(pm, slots, vdists)
        total = w.sum()
        if total <= 0 or not np.isfinite(total):
            probs = np.full(len(cand), 1.0 / len(cand))
        else:
            probs = w / total
        pick = int(np.searchsorted(np.cumsum(probs), gen.random(), side="right"))
        pick = min(pick, len(cand) - 1)
        walk.advance(cand[pick], math.log(max(probs[pick], 1e-300)))
    if instance.kind == TSP:
        walk.records.append(
            StateRecord(walk.current, start, 0.0, 0.0, oracle.distance(walk.current, start))
        )
        return Trajectory(
            nodes=walk.nodes,
            length=float(sum(r.step_reward for r in walk.records)),
            records=walk.records,
            kind=TSP,
        )
    return walk.finish()


def ant_construct(
    pm: PheromoneMap, instance: VrpInstance, graph: SparseGraph, n_ants: int,
    rng: RandomStream,
) -> list[Trajectory]:
    """n_ants tours sampled proportionally to tau^alpha * eta^beta over feasible moves."""
    if n_ants < 1:
        raise ParameterError("need at least one ant")
    oracle = DistanceOracle(instance)
    return [
        _ant_walk(pm, instance, graph, oracle, rng.child("ant", i).generator())
        for i in range(n_ants)
    ]


# ---------------------------------------------------------------------------
# Local search
# ---------------------------------------------------------------------------

def _route_cost(oracle: DistanceOracle, seq: list[int], closed: bool) -> float:
    total = sum(oracle.distance(a, b) for a, b in zip(seq, seq[1:]))
    if closed:
        total += oracle.distance(seq[-1], seq[0])
    return total


def _two_opt_cycle(seq: list[int], oracle: DistanceOracle) -> list[int]:
    """First-improvement 2-opt on a closed tour; sweeps restart until stable."""
    n = len(seq)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue  # same edge pair
                a, b = seq[i], seq[i + 1]
                c, d = seq[j], seq[(j + 1) % n]
                delta = (
                    oracle.distance(a, c) + oracle.distance(b, d)
                    - oracle.distance(a, b) - oracle.distance(c, d)
                )
                if delta < -1e-12:
                    seq[i + 1 : j + 1] = reversed(seq[i + 1 : j + 1])
                    improved = True
        # loop again after a full sweep with changes
    return seq


def _two_opt_path(route: list[int], oracle: DistanceOracle) -> list[int]:
    """2-opt inside one depot-to-depot route (endpoints fixed)."""
    n = len(route)
    improved = True
    while improved:
        improved = False
        for i in range(n - 3):
            for j in range(i + 2, n - 1):
                a, b = route[i], route[i + 1]
                c, d = route[j], route[j + 1]
                delta = (
                    oracle.distance(a, c) + oracle.distance(b, d)
                    - oracle.distance(a, b) - oracle.distance(c, d)
                )
                if delta < -1e-12:
                    route[i + 1 : j + 1] = reversed(route[i + 1 : j + 1])
                    improved = True
    return route


def _split_routes(nodes: list[int], depot: int) -> list[list[int]]:
    routes: list[list[int]] = []
    current: list[int] = []
    for node in nodes[1:]:
        if node == depot:
            routes.append(current)
            current = []
        else:
            current.append(node)
    return routes


def _join_routes(routes: list[list[int]], depot: int) -> list[int]:
    nodes = [depot]
    for r in routes:
        if not r:
            continue
        nodes.extend(r)
        nodes.append(depot)
    return nodes


def _relocate(
    routes: list[list[int]], instance: VrpInstance, oracle: DistanceOracle
) -> bool:
    """Move one customer between routes, first improvement; True if changed."""
    depot = instance.depot
    loads = [int(sum(instance.demands[c] for c in r)) for r in routes]
    for src in range(len(routes)):
        for pos in range(len(routes[src])):
            c = routes[src][pos]
            prev = routes[src][pos - 1] if pos > 0 else depot
            nxt = routes[src][pos + 1] if pos + 1 < len(routes[src]) else depot
            removal = (
                oracle.distance(prev, nxt)
                - oracle.distance(prev, c) - oracle.distance(c, nxt)
            )
            for dst in range(len(routes)):
                if dst == src:
                    continue
                if loads[dst] + int(instance.demands[c]) > instance.capacity:
                    continue
                for ins in range(len(routes[dst]) + 1):
                    a = routes[dst][ins - 1] if ins > 0 else depot
                    b = routes[dst][ins] if ins < len(routes[dst]) else depot
                    insertion = (
                        oracle.distance(a, c) + oracle.distance(c, b) - oracle.distance(a, b)
                    )
                    if removal + insertion < -1e-12:
                        routes[src].pop(pos)
                        routes[dst].insert(ins, c)
                        return True
    return False


def local_search(
    trajectory: Trajectory, instance: VrpInstance, mode: str = TWO_OPT
) -> Trajectory:
    """Refine a feasible tour; never increases length.

    two_opt reverses segments (whole tour for TSP, within each route for
    CVRP); two_opt_plus_relocate additionally moves single customers between
    CVRP routes while capacity allows.  Sweep order is fixed, so the result
    is deterministic.
    """
    if mode not in (TWO_OPT, TWO_OPT_PLUS_RELOCATE):
        raise ParameterError(f"unknown local search mode {mode!r}")
    problems = check_trajectory(instance, trajectory)
    if problems:
        raise ConsistencyError(f"local search needs a feasible input: {problems[0]}")
    oracle = DistanceOracle(instance)
    if instance.kind == TSP:
        seq = _two_opt_cycle(list(trajectory.nodes), oracle)
        result = Trajectory.from_nodes(instance, seq)
    else:
        depot = instance.depot
        routes = [
            _two_opt_path([depot] + r + [depot], oracle)[1:-1]
            for r in _split_routes(trajectory.nodes, depot)
        ]
        if mode == TWO_OPT_PLUS_RELOCATE:
            while _relocate(routes, instance, oracle):
                routes = [
                    _two_opt_path([depot] + r + [depot], oracle)[1:-1] for r in routes if r
                ]
        result = Trajectory.from_nodes(instance, _join_routes(routes, depot))
    if result.length > trajectory.length + 1e-12:
        raise ConsistencyError("local search increased the tour length")
    return result


# ---------------------------------------------------------------------------
# Pheromone update and the full loop
# ---------------------------------------------------------------------------

def pheromone_update(
    pm: PheromoneMap, trajectories: list[Trajectory], elite_count: int | None = None
) -> PheromoneMap:
    """Evaporate, deposit q/length along elite tours, clip into bounds."""
    elite_count = pm.elite_count if elite_count is None else elite_count
    if elite_count < 1:
        raise ParameterError("elite_count must be at least 1")
    tau = (1.0 - pm.rho) * pm.tau
    elites = sorted(trajectories, key=lambda t: t.length)[:elite_count]
    for traj in elites:
        deposit = pm.q / traj.length
        for rec in traj.records:
            slot = pm.graph.slot(rec.from_node, rec.to_node)
            if slot >= 0:
                tau[slot] += deposit
    return replace(pm, tau=pm.clipped(tau))


@dataclass
class AcoHistory:
    best_lengths: list[float]   # best-so-far after each iteration


def aco_solve(
    net: PolicyNet,
    instance: VrpInstance,
    graph: SparseGraph,
    iterations: int,
    n_ants: int,
    rng: RandomStream,
    use_local_search: bool = True,
    search_mode: str | None = None,
    output: PolicyOutput | None = None,
    pheromone_params: dict | None = None,
    update_pheromones: bool = True,
) -> tuple[Trajectory, AcoHistory]:
    """construct -> refine -> deposit loop; returns the best tour and history."""
    if iterations < 1:
        raise ParameterError("need at least one iteration")
    output = sampler._resolve_output(net, instance, graph, output)
    pm = heuristic_to_pheromone(output, graph, **(pheromone_params or {}))
    if search_mode is None:
        search_mode = TWO_OPT_PLUS_RELOCATE if instance.kind == CVRP else TWO_OPT
    best: Trajectory | None = None
    history = AcoHistory(best_lengths=[])
    for it in range(iterations):
        tours = ant_construct(pm, instance, graph, n_ants, rng.child("iter", it))
        if use_local_search:
            tours = [local_search(t, instance, search_mode) for t in tours]
        for t in tours:
            if best is None or t.length < best.length:
                best = t
        if update_pheromones:
            pm = pheromone_update(pm, tours)
        history.best_lengths.append(best.length)
    return best, history
