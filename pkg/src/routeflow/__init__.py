"""Routing policies trained with combined trajectory- and transition-level
balance objectives, plus exact combinatorial oracles, depot-guided decoding,
and an ant-colony refinement stage."""

from .instances import (
    CVRP,
    TSP,
    DistanceOracle,
    VrpInstance,
    distance,
    generate_cvrp,
    generate_tsp,
    parse_tsplib,
)
from .graphkit import FeatureSet, SparseGraph, build_features, default_k, knn_sparsify
from .network import NetConfig, PolicyNet, PolicyOutput, flow_value, gnn_forward
from .sampler import (
    RouteDecomposition,
    StateRecord,
    Trajectory,
    check_trajectory,
    decode,
    decompose,
    depot_guided_decode,
    feasible_mask,
    greedy_decode,
    sample_trajectories,
    trajectory_log_pf,
)
from .balance import (
    EnergyTable,
    LossBreakdown,
    backward_step_prob,
    backward_traj_logprob,
    db_loss_step,
    db_loss_trajectory,
    energy_table,
    hybrid_loss,
    reward_transform,
    step_reward,
    tb_loss,
    trajectory_reward,
)
from .combinatorics import (
    DestructionSequence,
    count_closed,
    count_recurrence,
    enumerate_destructions,
    verify_statements,
)
from .aco import PheromoneMap, aco_solve, ant_construct, heuristic_to_pheromone, local_search, pheromone_update
from .trainer import TrainConfig, TrainMetrics, load_checkpoint, optimizer_step, save_checkpoint, train
from .workbench import (
    BaselineSolutions,
    EvalReport,
    ablate_balance,
    ablate_decoding,
    built_in_baseline,
    evaluate,
    run_verification,
)
from .rng import RandomStream, derive_seed

__version__ = "0.1.0"
