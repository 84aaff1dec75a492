import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from routeflow import balance
from routeflow.balance import (
    CLOSED_FORM_PB,
    NEGATED,
    PAPER_LITERAL,
    UNIFORM_PB_ONE,
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
from routeflow.combinatorics import backward_traj_prob_exact, count_closed, synthetic_decomposition
from routeflow.errors import ParameterError
from routeflow.graphkit import build_features, knn_sparsify
from routeflow.instances import VrpInstance, generate_cvrp
from routeflow.network import gnn_forward
from routeflow.rng import RandomStream
from routeflow.sampler import StateRecord, Trajectory, sample_trajectories


def traj_with_rewards(rewards, kind="cvrp"):
    records = [StateRecord(0, 0, 0.0, 0.0, r) for r in rewards]
    return Trajectory(nodes=[0] * (len(rewards) + 1), length=float(sum(rewards)),
                      records=records, kind=kind)


def unit_square_cvrp():
    coords = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]])
    return VrpInstance("sq", "cvrp", coords, np.array([0, 1, 1, 1]), capacity=10)


class TestRewards:
    def test_step_reward_345(self):
        inst = VrpInstance(
            "t", "cvrp", np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([0, 1]), capacity=5
        )
        traj = Trajectory.from_nodes(inst, [0, 1, 0])
        assert step_reward(traj, 1) == 5.0
        assert step_reward(traj, 2) == 5.0
        with pytest.raises(ParameterError):
            step_reward(traj, 3)

    def test_single_route_perimeter(self):
        traj = Trajectory.from_nodes(unit_square_cvrp(), [0, 1, 2, 3, 0])
        assert trajectory_reward(traj) == pytest.approx(4.0, abs=1e-12)

    def test_out_and_back(self):
        inst = VrpInstance(
            "t", "cvrp", np.array([[0.0, 0.0], [0.0, 1.0]]), np.array([0, 1]), capacity=5
        )
        traj = Trajectory.from_nodes(inst, [0, 1, 0])
        assert trajectory_reward(traj) == pytest.approx(2.0, abs=1e-12)

    def test_equals_sum_of_steps(self, cvrp_setup, stream):
        inst, graph, _f, net, out = cvrp_setup
        traj = sample_trajectories(net, inst, graph, 1, stream, output=out)[0]
        assert trajectory_reward(traj) == pytest.approx(
            sum(step_reward(traj, t) for t in range(1, len(traj.records) + 1)), abs=1e-9
        )
        assert trajectory_reward(traj) == pytest.approx(traj.length, abs=1e-9)


class TestRewardTransform:
    def test_equal_lengths_give_ones(self):
        assert np.allclose(reward_transform([3.0, 3.0, 3.0], beta=20.0), 1.0)

    def test_scale_invariance(self):
        lengths = [2.0, 3.0, 5.0]
        a = reward_transform(lengths, beta=7.0)
        b = reward_transform([10 * x for x in lengths], beta=7.0)
        assert np.allclose(a, b)

    def test_beta_zero_switches_off(self):
        assert np.allclose(reward_transform([1.0, 9.0], beta=0.0), 1.0)

    def test_strictly_decreasing_in_length(self):
        r = reward_transform([1.0, 2.0, 3.0], beta=5.0)
        assert r[0] > r[1] > r[2] > 0

    def test_nonpositive_rejected(self):
        with pytest.raises(ParameterError):
            reward_transform([1.0, 0.0])


class TestEnergyTable:
    def test_two_trajectories_center_to_plus_minus_one(self):
        trajs = [traj_with_rewards([3.0]), traj_with_rewards([5.0])]
        table = energy_table(trajs, PAPER_LITERAL)
        assert table.values[:, 0].tolist() == [-1.0, 1.0]

    def test_negated_flips_sign(self):
        trajs = [traj_with_rewards([3.0]), traj_with_rewards([5.0])]
        assert energy_table(trajs, NEGATED).values[:, 0].tolist() == [1.0, -1.0]

    def test_identical_trajectories_all_zero(self):
        trajs = [traj_with_rewards([2.0, 4.0])] * 5
        assert np.all(energy_table(trajs).values == 0.0)

    def test_single_trajectory_all_zero(self):
        assert np.all(energy_table([traj_with_rewards([1.0, 2.0])]).values == 0.0)

    def test_padding_beyond_short_trajectories_is_zero(self):
        trajs = [traj_with_rewards([1.0, 2.0, 3.0]), traj_with_rewards([4.0])]
        table = energy_table(trajs)
        assert not table.alive[1, 1] and not table.alive[1, 2]
        assert table.values[1, 1] == 0.0 and table.values[1, 2] == 0.0
        # single alive entry in a column centers to zero as well
        assert table.values[0, 1] == 0.0

    @given(st.integers(0, 2**32), st.integers(2, 12))
    @settings(max_examples=25, deadline=None)
    def test_columns_sum_to_zero(self, seed, h):
        gen = np.random.default_rng(seed)
        trajs = [
            traj_with_rewards(gen.uniform(0.1, 2.0, size=gen.integers(1, 9)).tolist())
            for _ in range(h)
        ]
        assert np.abs(energy_table(trajs).column_sums()).max() < 1e-9


class TestBackwardProbabilities:
    def test_depot_anchor(self):
        assert backward_step_prob(2, 1, at_depot=True) == 1.0 / 5.0

    def test_customer_always_one(self):
        assert backward_step_prob(2, 1, at_depot=False) == 1.0
        assert backward_step_prob(0, 0, at_depot=False) == 1.0

    def test_single_option(self):
        assert backward_step_prob(0, 1, at_depot=True) == 1.0

    def test_empty_depot_choice_rejected(self):
        with pytest.raises(ParameterError):
            backward_step_prob(0, 0, at_depot=True)

    def test_traj_logprob_anchors(self):
        assert backward_traj_logprob(synthetic_decomposition(0, 0)) == 0.0
        assert backward_traj_logprob(synthetic_decomposition(2, 1)) == pytest.approx(
            -math.log(24.0), abs=1e-12
        )
        assert backward_traj_logprob(synthetic_decomposition(0, 3)) == pytest.approx(
            -math.log(6.0), abs=1e-12
        )

    @given(st.integers(0, 6), st.integers(0, 6))
    @settings(max_examples=49, deadline=None)
    def test_exact_rational_identity_and_float_agreement(self, a, j):
        assert backward_traj_prob_exact(a, j) * count_closed(a, j) == 1
        log_value = backward_traj_logprob(synthetic_decomposition(a, j))
        assert log_value == pytest.approx(-math.log(count_closed(a, j)), abs=1e-12)


def make_batch(cvrp_setup, stream, h=4):
    inst, graph, _f, net, out = cvrp_setup
    trajs = sample_trajectories(net, inst, graph, h, stream, output=out)
    balance.fill_state_records(net, out, trajs, PAPER_LITERAL)
    rewards = reward_transform([t.length for t in trajs])
    return inst, graph, net, out, trajs, rewards


class TestTbLoss:
    def test_balance_achieved_gives_zero(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, rewards = make_batch(cvrp_setup, stream, h=1)
        traj, rew = trajs[0], rewards[0]
        log_pb = backward_traj_logprob(balance.decompose(traj))
        log_z = math.log(rew) + log_pb - traj.log_pf_sum()
        assert tb_loss(trajs, log_z, rewards, CLOSED_FORM_PB) == pytest.approx(0.0, abs=1e-18)

    def test_single_trajectory_squared_residual(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, rewards = make_batch(cvrp_setup, stream, h=1)
        traj, rew = trajs[0], rewards[0]
        log_pb = backward_traj_logprob(balance.decompose(traj))
        r = 0.7 + traj.log_pf_sum() - math.log(rew) - log_pb
        assert tb_loss(trajs, 0.7, rewards, CLOSED_FORM_PB) == pytest.approx(r * r, abs=1e-12)

    def test_uniform_pb_mode_drops_backward_term(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, rewards = make_batch(cvrp_setup, stream, h=2)
        with_pb = tb_loss(trajs, 0.0, rewards, CLOSED_FORM_PB)
        without = tb_loss(trajs, 0.0, rewards, UNIFORM_PB_ONE)
        assert with_pb != without

    def test_nonnegative(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, rewards = make_batch(cvrp_setup, stream)
        assert tb_loss(trajs, 0.3, rewards, CLOSED_FORM_PB) >= 0.0


class TestDbLoss:
    def test_detailed_balance_satisfied_is_zero(self):
        rec = StateRecord(0, 1, -0.5, -0.5, 1.0, flow_from=2.0, flow_to=2.0, energy_to=0.0)
        assert db_loss_step(rec) == 0.0

    def test_residual_squared(self):
        rec = StateRecord(0, 1, -0.25, 0.0, 1.0, flow_from=0.5, flow_to=0.0, energy_to=0.75)
        assert db_loss_step(rec) == pytest.approx(1.0)

    def test_trajectory_sum_and_additivity(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, _r = make_batch(cvrp_setup, stream, h=2)
        t0, t1 = trajs
        merged = Trajectory(
            nodes=t0.nodes, length=t0.length, records=t0.records + t1.records, kind=t0.kind
        )
        assert db_loss_trajectory(merged) == pytest.approx(
            db_loss_trajectory(t0) + db_loss_trajectory(t1), abs=1e-12
        )

    def test_single_record_trajectory(self):
        rec = StateRecord(0, 1, -0.1, 0.0, 1.0, flow_from=0.2, flow_to=0.4, energy_to=0.0)
        traj = Trajectory(nodes=[0, 1], length=1.0, records=[rec], kind="cvrp")
        assert db_loss_trajectory(traj) == pytest.approx(db_loss_step(rec))


class TestHybridLoss:
    def test_lambda_zero_reduces_to_tb(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, rewards = make_batch(cvrp_setup, stream)
        breakdown = hybrid_loss(trajs, 0.2, rewards, lam=0.0)
        assert breakdown.hybrid == pytest.approx(breakdown.tb, abs=1e-15)
        assert breakdown.tb == pytest.approx(tb_loss(trajs, 0.2, rewards, CLOSED_FORM_PB))

    def test_weighted_composition(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, rewards = make_batch(cvrp_setup, stream)
        breakdown = hybrid_loss(trajs, 0.2, rewards, lam=2.0)
        assert breakdown.hybrid == pytest.approx(breakdown.tb + 2.0 * breakdown.db, abs=1e-12)
        assert breakdown.lambda_used == 2.0

    def test_arithmetic_anchor(self):
        # tb = 5 and db = 3 with lambda 2 combine to 11
        assert 5.0 + 2.0 * 3.0 == 11.0

    def test_per_trajectory_breakdown_consistent(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, rewards = make_batch(cvrp_setup, stream)
        breakdown = hybrid_loss(trajs, 0.0, rewards, lam=1.0)
        tb_terms = [p[0] for p in breakdown.per_trajectory]
        db_terms = [p[1] for p in breakdown.per_trajectory]
        assert breakdown.tb == pytest.approx(np.mean(tb_terms))
        assert breakdown.db == pytest.approx(np.sum(db_terms))
        assert all(t >= 0 and d >= 0 for t, d in breakdown.per_trajectory)

    def test_tb_weight_zero_gives_pure_db(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, rewards = make_batch(cvrp_setup, stream)
        breakdown = hybrid_loss(trajs, 0.0, rewards, lam=1.0, tb_weight=0.0)
        assert breakdown.hybrid == pytest.approx(breakdown.db, abs=1e-15)

    def test_negative_lambda_rejected(self, cvrp_setup, stream):
        _inst, _g, net, _out, trajs, rewards = make_batch(cvrp_setup, stream)
        with pytest.raises(ParameterError):
            hybrid_loss(trajs, 0.0, rewards, lam=-1.0)


class TestLossGraphAgreement:
    def test_float_and_autodiff_paths_agree(self, cvrp_setup, stream):
        inst, graph, net, out, trajs, rewards = make_batch(cvrp_setup, stream)
        breakdown = hybrid_loss(trajs, float(net.log_z.value), rewards, lam=1.0)
        graph_losses = balance.build_loss_graph(
            net, out, inst, graph, trajs, rewards, lam=1.0, decomp_mode=CLOSED_FORM_PB
        )
        assert float(graph_losses.tb.value) == pytest.approx(breakdown.tb, rel=1e-9)
        assert float(graph_losses.db.value) == pytest.approx(breakdown.db, rel=1e-9)
        assert float(graph_losses.hybrid.value) == pytest.approx(breakdown.hybrid, rel=1e-9)
