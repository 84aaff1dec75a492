import numpy as np
import pytest

from routeflow import autodiff as ad
from routeflow.autodiff import finite_diff_check, zero_grads
from routeflow.errors import ParameterError, ShapeError
from routeflow.graphkit import build_features, knn_sparsify, relabel_instance
from routeflow.instances import generate_cvrp, generate_tsp
from routeflow.network import (
    NetConfig,
    PolicyNet,
    flow_value,
    gnn_forward,
    log_flow_prefixes,
    virtual_edge_logit,
)


def zero_layer_weights(net):
    for name, p in net.params.items():
        if name.startswith("layer") and ".W" in name:
            p.value = np.zeros_like(p.value)


def zero_heads(net):
    for name in ("edge_head.W1", "edge_head.b1", "edge_head.W2", "edge_head.b2"):
        net.params[name].value = np.zeros_like(net.params[name].value)


def test_zero_weights_give_uniform_logits(cvrp_setup):
    inst, graph, feats, _net, _out = cvrp_setup
    net = PolicyNet.init(NetConfig(layers=2, hidden=8), seed=0)
    zero_layer_weights(net)
    zero_heads(net)
    out = gnn_forward(net, feats, graph, training=False)
    assert np.allclose(out.edge_logits.value, out.edge_logits.value[0])


def test_residual_identity_with_zeroed_branches(cvrp_setup):
    inst, graph, feats, net, _out = cvrp_setup
    zero_layer_weights(net)
    out = gnn_forward(net, feats, graph, training=True)
    projected = feats.node_feats @ net.params["node_in.W"].value + net.params["node_in.b"].value
    assert np.allclose(out.node_embeds.value, projected, atol=1e-12)


def test_permutation_equivariance():
    inst = generate_tsp(10, seed=21)
    graph = knn_sparsify(inst, 4)
    feats = build_features(inst, graph)
    net = PolicyNet.init(NetConfig(layers=2, hidden=8), seed=5)
    out = gnn_forward(net, feats, graph, training=False)

    perm = np.random.default_rng(1).permutation(inst.n_nodes)
    relabeled = relabel_instance(inst, perm)
    graph_p = knn_sparsify(relabeled, 4)
    out_p = gnn_forward(PolicyNet.from_payload(net.to_payload()), build_features(relabeled, graph_p), graph_p, training=False)

    for i in range(inst.n_nodes):
        assert np.allclose(out.node_embeds.value[i], out_p.node_embeds.value[perm[i]], atol=1e-9)
    logit_map = {}
    for e, (u, v) in enumerate(graph_p.edge_index):
        logit_map[(int(u), int(v))] = out_p.edge_logits.value[e]
    for e, (u, v) in enumerate(graph.edge_index):
        assert out.edge_logits.value[e] == pytest.approx(
            logit_map[(int(perm[u]), int(perm[v]))], abs=1e-9
        )


def test_forward_gradient_matches_finite_differences(cvrp_setup):
    inst, graph, feats, net, _out = cvrp_setup

    def loss_fn():
        out = gnn_forward(net, feats, graph, training=True)
        return out.edge_logits.sum() + (out.node_embeds * out.node_embeds).sum()

    report = finite_diff_check(
        loss_fn, net.params, epsilon=1e-4, num_coords=150, rng=np.random.default_rng(3)
    )
    assert report.max_rel_err < 1e-4


def test_forward_deterministic(cvrp_setup):
    inst, graph, feats, net, _out = cvrp_setup
    a = gnn_forward(net, feats, graph, training=False)
    b = gnn_forward(net, feats, graph, training=False)
    assert np.array_equal(a.edge_logits.value, b.edge_logits.value)
    assert np.array_equal(a.node_embeds.value, b.node_embeds.value)


def test_layer_norm_fallback_runs(cvrp_setup):
    inst, graph, feats, _net, _out = cvrp_setup
    net = PolicyNet.init(NetConfig(layers=2, hidden=8, norm="layer"), seed=1)
    out = gnn_forward(net, feats, graph, training=True)
    assert np.isfinite(out.edge_logits.value).all()


class TestFlowHead:
    def test_single_node_no_averaging(self, cvrp_setup):
        inst, graph, feats, net, out = cvrp_setup
        q = out.node_embeds.value[3]
        p = net.params
        hidden = np.maximum(q @ p["flow_head.W1"].value + p["flow_head.b1"].value, 0.0)
        expected = hidden @ p["flow_head.W2"].value + p["flow_head.b2"].value
        got = flow_value(net, [3], out.node_embeds)
        assert float(got.value) == pytest.approx(float(expected[0]), abs=1e-12)

    def test_duplicate_multiset_mean_invariance(self, cvrp_setup):
        inst, graph, feats, net, out = cvrp_setup
        once = float(flow_value(net, [4], out.node_embeds).value)
        twice = float(flow_value(net, [4, 4], out.node_embeds).value)
        assert once == pytest.approx(twice, abs=1e-12)

    def test_empty_state_rejected(self, cvrp_setup):
        inst, graph, feats, net, out = cvrp_setup
        with pytest.raises(ParameterError):
            flow_value(net, [], out.node_embeds)

    def test_prefix_values_match_direct_means(self, cvrp_setup):
        inst, graph, feats, net, out = cvrp_setup
        seq = [0, 3, 5, 0, 2]
        prefixes = log_flow_prefixes(net, out.node_embeds, seq).value
        for t in range(len(seq)):
            direct = float(flow_value(net, seq[: t + 1], out.node_embeds).value)
            assert prefixes[t] == pytest.approx(direct, abs=1e-12)

    def test_flow_gradient_finite_differences(self, cvrp_setup):
        inst, graph, feats, net, _out = cvrp_setup

        def loss_fn():
            out = gnn_forward(net, feats, graph, training=True)
            f = flow_value(net, [0, 2, 5, 2], out.node_embeds)
            return f * f

        report = finite_diff_check(
            loss_fn, net.params, epsilon=1e-4, num_coords=120, rng=np.random.default_rng(9)
        )
        assert report.max_rel_err < 1e-4


def test_virtual_edge_logit_matches_projected_distance(cvrp_setup):
    inst, graph, feats, net, _out = cvrp_setup
    d = 0.37
    p = net.params
    e0 = np.array([[d]]) @ p["edge_in.W"].value + p["edge_in.b"].value
    s = e0 @ p["edge_head.W1"].value + p["edge_head.b1"].value
    hidden = s * (1.0 / (1.0 + np.exp(-s)))  # silu
    expected = hidden @ p["edge_head.W2"].value + p["edge_head.b2"].value
    assert float(virtual_edge_logit(net, d).value) == pytest.approx(float(expected[0, 0]), abs=1e-12)


class TestPayload:
    def test_roundtrip_identical(self, small_net):
        payload = small_net.to_payload()
        again = PolicyNet.from_payload(payload)
        for name, t in small_net.params.items():
            assert np.array_equal(t.value, again.params[name].value)
        assert payload == again.to_payload()

    def test_shape_mismatch_names_tensor(self, small_net):
        payload = small_net.to_payload()
        payload["params"]["flow_head.W1"]["shape"] = [4, 4]
        payload["params"]["flow_head.W1"]["data"] = [0.0] * 16
        with pytest.raises(ShapeError, match="flow_head.W1"):
            PolicyNet.from_payload(payload)
