"""Rewards, energies, backward probabilities, and the balance losses.

Trajectory-level loss (squared log-ratio of source flow times forward
probability to reward times backward probability) is averaged over the batch;
the per-transition loss compares successive states through their log-flows
with a forward-looking energy term and is summed over a trajectory's
transitions.  State flows are parameterized in log space: the flow head's
output is used directly as log F, which keeps the per-transition residual a
plain linear combination and avoids positivity constraints.

The trajectory backward probability used by the trajectory-level loss is the
closed form 1/((a+j)! * 2^a) over sub-route destruction orders; the
per-transition loss uses the step-wise depot choice probability 1/(2a+j).
The two are deliberately not consistent with each other (see combinatorics);
each loss uses the form prescribed for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ParameterError
from .graphkit import SparseGraph
from .instances import CVRP, TSP, VrpInstance
from .network import PolicyNet, PolicyOutput, log_flow_prefixes
from .sampler import RouteDecomposition, StateRecord, Trajectory, decompose, step_log_probs

PAPER_LITERAL = "paper_literal"
NEGATED = "negated"

CLOSED_FORM_PB = "closed_form_pb"
UNIFORM_PB_ONE = "uniform_pb_one"

DEFAULT_REWARD_BETA = 20.0


def default_decomp_mode(kind: str) -> str:
    """CVRP uses the closed-form backward probability; TSP tours destruct uniquely."""
    return CLOSED_FORM_PB if kind == CVRP else UNIFORM_PB_ONE


# ---------------------------------------------------------------------------
# Rewards and energies
# ---------------------------------------------------------------------------

def step_reward(trajectory: Trajectory, t: int) -> float:
    """Cost of the t-th transition (1-indexed)."""
    if not (1 <= t <= len(trajectory.records)):
        raise ParameterError(f"step index {t} outside 1..{len(trajectory.records)}")
    return trajectory.records[t - 1].step_reward


def trajectory_reward(trajectory: Trajectory) -> float:
    """Total tour length (sum of all step costs)."""
    return float(sum(r.step_reward for r in trajectory.records))


def reward_transform(lengths, beta: float = DEFAULT_REWARD_BETA) -> np.ndarray:
    """Positive, scale-invariant batch rewards from raw tour lengths.

    R_i = exp(beta * (mean(L) - L_i) / mean(L)): shorter than the batch mean
    earns more than 1, longer earns less; multiplying all lengths by a
    constant changes nothing; beta = 0 switches rewards off (all ones).
    """
    arr = np.asarray(lengths, dtype=np.float64)
    if arr.size < 1:
        raise ParameterError("need at least one length")
    if (arr <= 0).any():
        raise ParameterError("lengths must be positive")
    mean = arr.mean()
    return np.exp(beta * (mean - arr) / mean)


@dataclass
class EnergyTable:
    """Mean-centered step rewards, aligned by transition index.

    values[i, t] is the energy of trajectory i's state after transition t;
    columns are centered over the trajectories that actually have transition
    t, and entries past a trajectory's end are zero padding.  Every column
    therefore sums to zero.
    """

    values: np.ndarray   # (h, m_max)
    alive: np.ndarray    # (h, m_max) bool
    sign: str

    @property
    def h(self) -> int:
        return self.values.shape[0]

    def column_sums(self) -> np.ndarray:
        return self.values.sum(axis=0)


def energy_table(trajectories: list[Trajectory], sign: str = PAPER_LITERAL) -> EnergyTable:
    if sign not in (PAPER_LITERAL, NEGATED):
        raise ParameterError(f"unknown energy sign {sign!r}")
    h = len(trajectories)
    if h < 1:
        raise ParameterError("need at least one trajectory")
    m_max = max(len(t.records) for t in trajectories)
    rewards = np.zeros((h, m_max))
    alive = np.zeros((h, m_max), dtype=bool)
    for i, traj in enumerate(trajectories):
        m = len(traj.records)
        rewards[i, :m] = [r.step_reward for r in traj.records]
        alive[i, :m] = True
    values = np.zeros((h, m_max))
    for t in range(m_max):
        col = alive[:, t]
        if col.any():
            centered = rewards[col, t] - rewards[col, t].mean()
            values[col, t] = centered if sign == PAPER_LITERAL else -centered
    return EnergyTable(values=values, alive=alive, sign=sign)


# ---------------------------------------------------------------------------
# Backward probabilities
# ---------------------------------------------------------------------------

def backward_step_prob(a: int, j: int, at_depot: bool) -> float:
    """Probability of one backward destruction step.

    At the depot the choice is uniform over the 2a+j sub-route ends still
    attached; everywhere else the predecessor is forced.
    """
    if a < 0 or j < 0:
        raise ParameterError("counts must be non-negative")
    if not at_depot:
        return 1.0
    if 2 * a + j < 1:
        raise ParameterError("depot destruction choice needs at least one sub-route")
    return 1.0 / (2 * a + j)


def backward_traj_logprob(decomp: RouteDecomposition) -> float:
    """log of the uniform-over-orderings trajectory backward probability."""
    a, j = decomp.a, decomp.j
    if a < 0 or j < 0:
        raise ParameterError("counts must be non-negative")
    return -(math.lgamma(a + j + 1) + a * math.log(2.0))


def _traj_log_pb(trajectory: Trajectory, decomp_mode: str) -> float:
    if decomp_mode == UNIFORM_PB_ONE:
        return 0.0
    if decomp_mode == CLOSED_FORM_PB:
        return backward_traj_logprob(decompose(trajectory))
    raise ParameterError(f"unknown decomp mode {decomp_mode!r}")


# ---------------------------------------------------------------------------
# Record post-pass (flows from the network, energies from the batch)
# ---------------------------------------------------------------------------

def _state_sequence(trajectory: Trajectory) -> list[int]:
    # TSP's implicit return appends the start node once more
    if trajectory.kind == TSP:
        return trajectory.nodes + [trajectory.nodes[0]]
    return trajectory.nodes


def fill_state_records(
    net: PolicyNet,
    output: PolicyOutput,
    trajectories: list[Trajectory],
    energy_sign: str = PAPER_LITERAL,
) -> EnergyTable:
    """Fill flow and energy fields of every record in the batch (in place)."""
    table = energy_table(trajectories, energy_sign)
    for i, traj in enumerate(trajectories):
        prefixes = log_flow_prefixes(net, output.node_embeds, _state_sequence(traj)).value
        for t, rec in enumerate(traj.records):
            rec.flow_from = float(prefixes[t])
            rec.flow_to = float(prefixes[t + 1])
            rec.energy_to = float(table.values[i, t])
    return table


# ---------------------------------------------------------------------------
# Losses over recorded trajectories (plain floats)
# ---------------------------------------------------------------------------

def tb_residual(log_pf_sum, log_reward, log_pb, log_z):
    """Shared residual form; works for floats and autodiff tensors alike."""
    return log_z + log_pf_sum - log_reward - log_pb


def db_step_residual(log_pf, log_flow_from, energy_to, log_pb, log_flow_to):
    """Predecessor energy is zero by construction, successor energy enters as-is."""
    return log_pf + log_flow_from + energy_to - log_pb - log_flow_to


def tb_loss(
    trajectories: list[Trajectory], log_z: float, rewards, decomp_mode: str
) -> float:
    """Mean squared trajectory-balance residual over the batch."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape != (len(trajectories),):
        raise ParameterError("need one reward per trajectory")
    if (rewards <= 0).any():
        raise ParameterError("rewards must be positive")
    total = 0.0
    for traj, rew in zip(trajectories, rewards):
        r = tb_residual(traj.log_pf_sum(), math.log(rew), _traj_log_pb(traj, decomp_mode), log_z)
        if not math.isfinite(r):
            raise NumericError("non-finite trajectory-balance residual")
        total += r * r
    return total / len(trajectories)


def db_loss_step(record: StateRecord) -> float:
    r = db_step_residual(
        record.log_pf, record.flow_from, record.energy_to, record.log_pb, record.flow_to
    )
    return r * r


def db_loss_trajectory(trajectory: Trajectory) -> float:
    return float(sum(db_loss_step(r) for r in trajectory.records))


@dataclass
class LossBreakdown:
    tb: float
    db: float
    hybrid: float
    per_trajectory: list[tuple[float, float]]
    lambda_used: float


def hybrid_loss(
    trajectories: list[Trajectory],
    log_z: float,
    rewards,
    lam: float = 1.0,
    decomp_mode: str = CLOSED_FORM_PB,
    tb_weight: float = 1.0,
) -> LossBreakdown:
    """Combined objective: tb_weight * tb + lambda * sum of per-trajectory db.

    lam=1 with tb_weight=1 is the reference configuration; lam=0 reduces to
    the trajectory loss alone, tb_weight=0 gives the pure per-transition mode.
    """
    if lam < 0:
        raise ParameterError("lambda must be non-negative")
    rewards = np.asarray(rewards, dtype=np.float64)
    per: list[tuple[float, float]] = []
    for traj, rew in zip(trajectories, rewards):
        r = tb_residual(traj.log_pf_sum(), math.log(rew), _traj_log_pb(traj, decomp_mode), log_z)
        per.append((r * r, db_loss_trajectory(traj)))
    tb = float(np.mean([p[0] for p in per]))
    db = float(np.sum([p[1] for p in per]))
    return LossBreakdown(
        tb=tb, db=db, hybrid=tb_weight * tb + lam * db, per_trajectory=per, lambda_used=lam
    )


# ---------------------------------------------------------------------------
# Differentiable loss graph (training and gradient checks)
# ---------------------------------------------------------------------------

@dataclass
class LossGraph:
    tb: Tensor
    db: Tensor
    hybrid: Tensor


def build_loss_graph(
    net: PolicyNet,
    output: PolicyOutput,
    instance: VrpInstance,
    graph: SparseGraph,
    trajectories: list[Trajectory],
    rewards,
    lam: float = 1.0,
    decomp_mode: str | None = None,
    temperature: float = 1.0,
    tb_weight: float = 1.0,
) -> LossGraph:
    """Autodiff version of hybrid_loss over recorded trajectories.

    Records must have been through fill_state_records (energies are read from
    them as constants); forward log-probabilities and log-flows are rebuilt
    differentiably from `output`.
    """
    if decomp_mode is None:
        decomp_mode = default_decomp_mode(instance.kind)
    rewards = np.asarray(rewards, dtype=np.float64)
    tb_terms: list[Tensor] = []
    db_total: Tensor | None = None
    for traj, rew in zip(trajectories, rewards):
        logpf = ad.stack(step_log_probs(net, output, instance, graph, traj, temperature))
        log_pb_steps = np.array([r.log_pb for r in traj.records])
        energies = np.array([r.energy_to for r in traj.records])
        m = len(traj.records)

        residual = tb_residual(
            ad.tsum(logpf), math.log(float(rew)), _traj_log_pb(traj, decomp_mode), net.log_z
        )
        tb_terms.append(residual * residual)

        prefixes = log_flow_prefixes(net, output.node_embeds, _state_sequence(traj))
        step_res = db_step_residual(
            logpf, prefixes[:m], ad.constant(energies), ad.constant(log_pb_steps), prefixes[1:]
        )
        db_i = ad.tsum(step_res * step_res)
        db_total = db_i if db_total is None else db_total + db_i
    tb = ad.tmean(ad.stack(tb_terms))
    hybrid = tb * tb_weight + db_total * lam
    return LossGraph(tb=tb, db=db_total, hybrid=hybrid)
