"""Trajectory construction on top of policy edge logits.

All decoders share one candidate rule.  CVRP: from the depot, any unvisited
neighbor; from a customer, any unvisited in-capacity neighbor plus the depot
(force-included in every neighbor list).  TSP: unvisited neighbors.  If the
k-NN neighborhood is exhausted but feasible customers remain globally, the
nearest one is admitted as a single virtual edge, so construction never dead
ends on a valid instance.

CVRP trajectories start and end at the depot; capacity resets on every depot
visit.  TSP trajectories are permutations with the implicit return edge
recorded as a final forced transition (probability 1), so the stored length
always equals the sum of per-step rewards.  The uniform choice of TSP start
node in sampling mode is not part of the recorded transition probabilities.

Step backward probabilities follow the sub-route destruction model: a
transition into the depot is one of 2a+j equally likely destruction choices,
where a and j count the multi- and single-customer sub-routes completed so
far (the current one included); every other transition is forced.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    ConsistencyError,
    InfeasibilityError,
    ParameterError,
    UnsupportedModeError,
)
from .graphkit import SparseGraph
from .instances import CVRP, TSP, DistanceOracle, VrpInstance
from .network import PolicyNet, PolicyOutput, gnn_forward, virtual_edge_logit
from .rng import RandomStream

SAMPLE = "sample"
GREEDY = "greedy"


@dataclass
class StateRecord:
    from_node: int
    to_node: int
    log_pf: float
    log_pb: float
    step_reward: float
    flow_from: float = 0.0
    flow_to: float = 0.0
    energy_to: float = 0.0


@dataclass
class Trajectory:
    nodes: list[int]
    length: float
    records: list[StateRecord]
    kind: str

    @classmethod
    def from_nodes(cls, instance: VrpInstance, nodes: list[int]) -> "Trajectory":
        """Rebuild a trajectory from a node sequence (search results).

        Probability and flow fields are neutral (0); only rewards are filled.
        For TSP the sequence is the permutation; the closing edge is appended
        as a record.
        """
        oracle = DistanceOracle(instance)
        pairs = list(zip(nodes, nodes[1:]))
        if instance.kind == TSP:
            pairs.append((nodes[-1], nodes[0]))
        records = [
            StateRecord(a, b, 0.0, 0.0, oracle.distance(a, b)) for a, b in pairs
        ]
        return cls(
            nodes=list(nodes),
            length=float(sum(r.step_reward for r in records)),
            records=records,
            kind=instance.kind,
        )

    def log_pf_sum(self) -> float:
        return float(sum(r.log_pf for r in self.records))

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "nodes": [int(x) for x in self.nodes],
            "length": self.length,
            "records": [asdict(r) for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


@dataclass
class RouteDecomposition:
    a: int                       # sub-routes serving >= 2 customers
    j: int                       # sub-routes serving exactly 1 customer
    segments: list[list[int]]    # customer index lists, in trajectory order


def decompose(trajectory: Trajectory) -> RouteDecomposition:
    """Split a CVRP trajectory at depot visits and count sub-route kinds."""
    if trajectory.kind != CVRP:
        raise UnsupportedModeError("decompose applies to cvrp trajectories")
    nodes = trajectory.nodes
    if len(nodes) < 2 or nodes[0] != nodes[-1]:
        raise ConsistencyError("trajectory must start and end at the depot")
    depot = nodes[0]
    segments: list[list[int]] = []
    current: list[int] = []
    for node in nodes[1:]:
        if node == depot:
            if not current:
                raise ConsistencyError("two consecutive depot visits")
            segments.append(current)
            current = []
        else:
            current.append(node)
    if current:
        raise ConsistencyError("trajectory does not end at the depot")
    a = sum(1 for s in segments if len(s) >= 2)
    j = sum(1 for s in segments if len(s) == 1)
    return RouteDecomposition(a=a, j=j, segments=segments)


def check_trajectory(instance: VrpInstance, trajectory: Trajectory) -> list[str]:
    """Independent feasibility check; returns a list of violations (empty = ok)."""
    problems: list[str] = []
    nodes = trajectory.nodes
    reward_sum = sum(r.step_reward for r in trajectory.records)
    if abs(reward_sum - trajectory.length) > 1e-9:
        problems.append(f"length {trajectory.length} != sum of step rewards {reward_sum}")
    if instance.kind == CVRP:
        depot = instance.depot
        if nodes[0] != depot or nodes[-1] != depot:
            problems.append("route does not start and end at the depot")
        seen: dict[int, int] = {}
        load = 0
        prev = None
        for node in nodes:
            if node == depot:
                if prev == depot:
                    problems.append("consecutive depot visits")
                load = 0
            else:
                seen[node] = seen.get(node, 0) + 1
                load += int(instance.demands[node])
                if load > instance.capacity:
                    problems.append(f"capacity exceeded at node {node}: {load}")
            prev = node
        expected = set(instance.customers())
        visited = set(seen)
        if visited != expected:
            problems.append(f"missing customers: {sorted(expected - visited)}")
        dupes = [c for c, k in seen.items() if k > 1]
        if dupes:
            problems.append(f"customers visited more than once: {sorted(dupes)}")
    else:
        if sorted(nodes) != list(range(instance.n_nodes)):
            problems.append("tsp trajectory is not a permutation of the nodes")
    return problems


# ---------------------------------------------------------------------------
# Candidate machinery (single source of truth for every decoder)
# ---------------------------------------------------------------------------

def _nearest_feasible(
    instance: VrpInstance, oracle: DistanceOracle, visited: np.ndarray,
    current: int, remaining: int | None,
) -> int | None:
    """Globally nearest unvisited (and in-capacity) customer, ties by index."""
    row = oracle.row(current)
    best = None
    best_d = math.inf
    for c in range(instance.n_nodes):
        if visited[c] or c == current:
            continue
        if instance.kind == CVRP:
            if c == instance.depot or (remaining is not None and instance.demands[c] > remaining):
                continue
        d = float(row[c])
        if d < best_d or (d == best_d and (best is None or c < best)):
            best, best_d = c, d
    return best


def _candidates(
    instance: VrpInstance, graph: SparseGraph, oracle: DistanceOracle,
    visited: np.ndarray, current: int, remaining: int | None, n_unvisited: int,
) -> tuple[list[int], list[int], list[float]]:
    """Feasible next nodes in neighbor-list order.

    Returns (nodes, edge slots, virtual distances); slot -1 marks a virtual
    fallback edge, in which case its distance is supplied.
    """
    depot = instance.depot
    nodes: list[int] = []
    slots: list[int] = []
    if instance.kind == CVRP:
        if current == depot:
            for pos, c in enumerate(graph.neighbors[current]):
                c = int(c)
                if not visited[c]:
                    nodes.append(c)
                    slots.append(current * graph.degree + pos)
        else:
            for pos, c in enumerate(graph.neighbors[current]):
                c = int(c)
                if c == depot:
                    nodes.append(c)
                    slots.append(current * graph.degree + pos)
                elif not visited[c] and instance.demands[c] <= remaining:
                    nodes.append(c)
                    slots.append(current * graph.degree + pos)
    else:
        for pos, c in enumerate(graph.neighbors[current]):
            c = int(c)
            if not visited[c]:
                nodes.append(c)
                slots.append(current * graph.degree + pos)
    if not nodes and n_unvisited > 0:
        fallback = _nearest_feasible(instance, oracle, visited, current, remaining)
        if fallback is not None:
            return [fallback], [-1], [float(oracle.distance(current, fallback))]
    return nodes, slots, []


def feasible_mask(
    instance: VrpInstance, graph: SparseGraph, visited, current: int,
    remaining_capacity: int | None,
) -> np.ndarray:
    """Boolean mask of allowed next nodes (before the virtual-edge fallback)."""
    vis = np.zeros(instance.n_nodes, dtype=bool)
    if isinstance(visited, np.ndarray) and visited.dtype == bool:
        vis[:] = visited
    else:
        vis[list(visited)] = True
    oracle = DistanceOracle(instance)
    nodes, _slots, _ = _candidates(
        instance, graph, oracle, vis, current, remaining_capacity, 0
    )
    mask = np.zeros(instance.n_nodes, dtype=bool)
    mask[nodes] = True
    return mask


def _candidate_logits(
    net: PolicyNet, logits_value: np.ndarray, slots: list[int], vdists: list[float]
) -> np.ndarray:
    out = np.empty(len(slots))
    for i, s in enumerate(slots):
        out[i] = logits_value[s] if s >= 0 else float(virtual_edge_logit(net, vdists[i]).value)
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - (m + math.log(np.exp(z - m).sum()))


def _pick(
    logp: np.ndarray, cand_nodes: list[int], mode: str, gen: np.random.Generator | None
) -> int:
    """Index into the candidate list; greedy ties break to the lowest node index."""
    if mode == GREEDY:
        best = logp.max()
        ties = [i for i, v in enumerate(logp) if v == best]
        return min(ties, key=lambda i: cand_nodes[i])
    if gen is None:
        raise ParameterError("sampling mode needs a random stream")
    u = gen.random()
    cum = np.cumsum(np.exp(logp))
    cum[-1] = 1.0  # guard against rounding
    return int(np.searchsorted(cum, u, side="right"))


class _Walk:
    """Mutable construction state shared by the decoders."""

    def __init__(self, instance: VrpInstance, graph: SparseGraph, oracle: DistanceOracle, start: int):
        self.instance = instance
        self.graph = graph
        self.oracle = oracle
        self.visited = np.zeros(instance.n_nodes, dtype=bool)
        self.visited[start] = True
        self.current = start
        self.remaining = instance.capacity if instance.kind == CVRP else None
        self.n_unvisited = instance.n_customers if instance.kind == CVRP else instance.n_nodes - 1
        self.multi = 0   # completed sub-routes with >= 2 customers
        self.single = 0  # completed sub-routes with exactly 1 customer
        self.seg_len = 0
        self.nodes = [start]
        self.records: list[StateRecord] = []

    def advance(self, node: int, log_pf: float) -> None:
        inst = self.instance
        reward = self.oracle.distance(self.current, node)
        log_pb = 0.0
        if inst.kind == CVRP and node == inst.depot:
            if self.seg_len >= 2:
                self.multi += 1
            elif self.seg_len == 1:
                self.single += 1
            log_pb = -math.log(2 * self.multi + self.single)
            self.remaining = inst.capacity
            self.seg_len = 0
        else:
            self.visited[node] = True
            self.n_unvisited -= 1
            if inst.kind == CVRP:
                self.remaining -= int(inst.demands[node])
                self.seg_len += 1
        self.records.append(StateRecord(self.current, node, float(log_pf), log_pb, reward))
        self.nodes.append(node)
        self.current = node

    def finish(self) -> Trajectory:
        return Trajectory(
            nodes=self.nodes,
            length=float(sum(r.step_reward for r in self.records)),
            records=self.records,
            kind=self.instance.kind,
        )


def _resolve_output(
    net: PolicyNet, instance: VrpInstance, graph: SparseGraph, output: PolicyOutput | None
) -> PolicyOutput:
    if output is not None:
        return output
    from .graphkit import build_features

    return gnn_forward(net, build_features(instance, graph), graph, training=False)


def _run_cvrp(
    net: PolicyNet, instance: VrpInstance, graph: SparseGraph, logits_value: np.ndarray,
    depot_mode: str, customer_mode: str, gen: np.random.Generator | None,
    temperature: float, oracle: DistanceOracle,
) -> Trajectory:
    walk = _Walk(instance, graph, oracle, instance.depot)
    depot = instance.depot
    while walk.n_unvisited > 0 or walk.current != depot:
        cand, slots, vdists = _candidates(
            instance, graph, oracle, walk.visited, walk.current, walk.remaining, walk.n_unvisited
        )
        if not cand:
            raise InfeasibilityError(
                f"no feasible action at node {walk.current} with {walk.n_unvisited} customers left"
            )
        logp = _log_softmax(_candidate_logits(net, logits_value, slots, vdists) / temperature)
        mode = depot_mode if walk.current == depot else customer_mode
        pick = _pick(logp, cand, mode, gen)
        walk.advance(cand[pick], logp[pick])
    return walk.finish()


def _run_tsp(
    net: PolicyNet, instance: VrpInstance, graph: SparseGraph, logits_value: np.ndarray,
    mode: str, gen: np.random.Generator | None, temperature: float, oracle: DistanceOracle,
) -> Trajectory:
    start = 0 if mode == GREEDY else int(gen.integers(instance.n_nodes))
    walk = _Walk(instance, graph, oracle, start)
    while walk.n_unvisited > 0:
        cand, slots, vdists = _candidates(
            instance, graph, oracle, walk.visited, walk.current, None, walk.n_unvisited
        )
        if not cand:
            raise InfeasibilityError(f"no feasible action at node {walk.current}")
        logp = _log_softmax(_candidate_logits(net, logits_value, slots, vdists) / temperature)
        pick = _pick(logp, cand, mode, gen)
        walk.advance(cand[pick], logp[pick])
    # implicit return edge, forced
    walk.records.append(
        StateRecord(walk.current, start, 0.0, 0.0, oracle.distance(walk.current, start))
    )
    return Trajectory(
        nodes=walk.nodes,
        length=float(sum(r.step_reward for r in walk.records)),
        records=walk.records,
        kind=TSP,
    )


def decode(
    net: PolicyNet,
    instance: VrpInstance,
    graph: SparseGraph,
    depot_mode: str = SAMPLE,
    customer_mode: str = GREEDY,
    rng: RandomStream | None = None,
    temperature: float = 1.0,
    output: PolicyOutput | None = None,
) -> Trajectory:
    """One CVRP trajectory with independent depot/customer decoding modes."""
    if instance.kind != CVRP:
        raise UnsupportedModeError("depot/customer decoding modes apply to cvrp only")
    for m in (depot_mode, customer_mode):
        if m not in (SAMPLE, GREEDY):
            raise ParameterError(f"unknown decode mode {m!r}")
    output = _resolve_output(net, instance, graph, output)
    gen = rng.generator() if rng is not None else None
    if SAMPLE in (depot_mode, customer_mode) and gen is None:
        raise ParameterError("sampling mode needs a random stream")
    oracle = DistanceOracle(instance)
    return _run_cvrp(
        net, instance, graph, output.edge_logits.value, depot_mode, customer_mode,
        gen, temperature, oracle,
    )


def depot_guided_decode(
    net: PolicyNet, instance: VrpInstance, graph: SparseGraph, rng: RandomStream,
    temperature: float = 1.0, output: PolicyOutput | None = None,
) -> Trajectory:
    """Sample at depot states, act greedily at customer states."""
    return decode(
        net, instance, graph, depot_mode=SAMPLE, customer_mode=GREEDY,
        rng=rng, temperature=temperature, output=output,
    )


def greedy_decode(
    net: PolicyNet, instance: VrpInstance, graph: SparseGraph,
    output: PolicyOutput | None = None,
) -> Trajectory:
    """Deterministic argmax decoding (TSP starts at node 0)."""
    output = _resolve_output(net, instance, graph, output)
    oracle = DistanceOracle(instance)
    if instance.kind == CVRP:
        return _run_cvrp(
            net, instance, graph, output.edge_logits.value, GREEDY, GREEDY, None, 1.0, oracle
        )
    return _run_tsp(net, instance, graph, output.edge_logits.value, GREEDY, None, 1.0, oracle)


def sample_trajectories(
    net: PolicyNet, instance: VrpInstance, graph: SparseGraph, h: int, rng: RandomStream,
    temperature: float = 1.0, output: PolicyOutput | None = None,
) -> list[Trajectory]:
    """h independent rollouts, one derived random sub-stream per rollout."""
    if h < 1:
        raise ParameterError("need at least one rollout")
    output = _resolve_output(net, instance, graph, output)
    oracle = DistanceOracle(instance)
    out = []
    for i in range(h):
        gen = rng.child("rollout", i).generator()
        if instance.kind == CVRP:
            out.append(
                _run_cvrp(
                    net, instance, graph, output.edge_logits.value, SAMPLE, SAMPLE,
                    gen, temperature, oracle,
                )
            )
        else:
            out.append(
                _run_tsp(
                    net, instance, graph, output.edge_logits.value, SAMPLE,
                    gen, temperature, oracle,
                )
            )
    return out


# ---------------------------------------------------------------------------
# Replay (recompute per-step quantities along a fixed trajectory)
# ---------------------------------------------------------------------------

def _walk_steps(instance: VrpInstance, graph: SparseGraph, oracle: DistanceOracle, trajectory: Trajectory):
    """Yield (candidate nodes, slots, virtual dists, chosen position) per transition.

    For TSP the final implicit-return record is yielded as (None, ...) to mark
    a forced step.
    """
    nodes = trajectory.nodes
    walk = _Walk(instance, graph, oracle, nodes[0])
    for target in nodes[1:]:
        cand, slots, vdists = _candidates(
            instance, graph, oracle, walk.visited, walk.current, walk.remaining, walk.n_unvisited
        )
        if target not in cand:
            raise ConsistencyError(
                f"trajectory step {walk.current}->{target} is not a feasible candidate"
            )
        pick = cand.index(target)
        yield cand, slots, vdists, pick
        walk.advance(target, 0.0)
    if instance.kind == TSP:
        yield None, None, None, None


def step_log_probs(
    net: PolicyNet, output: PolicyOutput, instance: VrpInstance, graph: SparseGraph,
    trajectory: Trajectory, temperature: float = 1.0,
) -> list[Tensor]:
    """Differentiable log forward probability of each recorded transition."""
    oracle = DistanceOracle(instance)
    logits = output.edge_logits
    out: list[Tensor] = []
    for cand, slots, vdists, pick in _walk_steps(instance, graph, oracle, trajectory):
        if cand is None:
            out.append(ad.constant(0.0))
            continue
        if all(s >= 0 for s in slots):
            sel = ad.index_select(logits, np.asarray(slots, dtype=np.int64))
        else:
            # fallback steps carry exactly one virtual candidate
            sel = ad.stack([virtual_edge_logit(net, vdists[0])])
        z = sel * (1.0 / temperature)
        out.append(ad.take(z, pick) - ad.logsumexp(z))
    return out


def step_distributions(
    net: PolicyNet, instance: VrpInstance, graph: SparseGraph, trajectory: Trajectory,
    output: PolicyOutput | None = None, temperature: float = 1.0,
) -> list[tuple[list[int], np.ndarray]]:
    """Per-transition (candidate nodes, probabilities); diagnostics and tests."""
    output = _resolve_output(net, instance, graph, output)
    oracle = DistanceOracle(instance)
    result = []
    for cand, slots, vdists, _pick in _walk_steps(instance, graph, oracle, trajectory):
        if cand is None:
            continue
        logp = _log_softmax(
            _candidate_logits(net, output.edge_logits.value, slots, vdists) / temperature
        )
        result.append((cand, np.exp(logp)))
    return result


def trajectory_log_pf(
    net: PolicyNet, instance: VrpInstance, graph: SparseGraph, trajectory: Trajectory,
    output: PolicyOutput | None = None, temperature: float = 1.0,
) -> float:
    """Trajectory-level log forward probability (product over its transitions)."""
    output = _resolve_output(net, instance, graph, output)
    oracle = DistanceOracle(instance)
    total = 0.0
    for cand, slots, vdists, pick in _walk_steps(instance, graph, oracle, trajectory):
        if cand is None:
            continue
        logp = _log_softmax(
            _candidate_logits(net, output.edge_logits.value, slots, vdists) / temperature
        )
        total += float(logp[pick])
    return total
