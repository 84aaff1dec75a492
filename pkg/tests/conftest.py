import numpy as np
import pytest

from routeflow.graphkit import build_features, knn_sparsify
from routeflow.instances import generate_cvrp, generate_tsp
from routeflow.network import NetConfig, PolicyNet, gnn_forward
from routeflow.rng import RandomStream


@pytest.fixture
def small_cvrp():
    return generate_cvrp(8, seed=11, capacity=30, demand_lo=1, demand_hi=9)


@pytest.fixture
def small_tsp():
    return generate_tsp(8, seed=12)


@pytest.fixture
def small_net():
    return PolicyNet.init(NetConfig(layers=2, hidden=8), seed=3)


@pytest.fixture
def cvrp_setup(small_cvrp, small_net):
    graph = knn_sparsify(small_cvrp, 5)
    feats = build_features(small_cvrp, graph)
    output = gnn_forward(small_net, feats, graph, training=False)
    return small_cvrp, graph, feats, small_net, output


@pytest.fixture
def stream():
    return RandomStream(2024)
