"""Message-passing policy network.

Per layer, node and edge embeddings are updated jointly:

    h_i <- h_i + SiLU(BN(W1 h_i + mean_{j in N(i)} sigmoid(e_ij) * (W2 h_j)))
    e_ij <- e_ij + SiLU(BN(W3 e_ij + W4 h_i + W5 h_j))

with mean pooling over each node's outgoing sparse edges.  Three heads:
a 2-layer edge MLP producing one logit per directed edge, a 2-layer ReLU
flow head mapping node embeddings to per-node log-flow contributions, and a
learnable log-partition scalar.  State flow is parameterized in log space:
the flow head's output is read as log F(s).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ParameterError, ShapeError
from .graphkit import FeatureSet, SparseGraph
from .rng import RandomStream

NODE_FEAT_DIM = 4
EDGE_FEAT_DIM = 1


@dataclass
class NetConfig:
    layers: int = 3
    hidden: int = 16
    node_feat_dim: int = NODE_FEAT_DIM
    edge_feat_dim: int = EDGE_FEAT_DIM
    norm: str = "batch"        # "batch" or "layer" (batch-size-1 debugging fallback)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1:
            raise ParameterError("layers and hidden width must be positive")
        if self.norm not in ("batch", "layer"):
            raise ParameterError(f"unknown norm mode {self.norm!r}")


@dataclass
class PolicyOutput:
    edge_logits: Tensor   # (E,) pre-softmax logits, one per directed sparse edge
    node_embeds: Tensor   # (n, hidden)


class PolicyNet:
    """Parameters (autodiff tensors) plus batch-norm running statistics."""

    def __init__(self, config: NetConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    # -- construction ---------------------------------------------------------

    @staticmethod
    def _param_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
        d = config.hidden
        shapes: dict[str, tuple[int, ...]] = {
            "node_in.W": (config.node_feat_dim, d),
            "node_in.b": (d,),
            "edge_in.W": (config.edge_feat_dim, d),
            "edge_in.b": (d,),
            "edge_head.W1": (d, d),
            "edge_head.b1": (d,),
            "edge_head.W2": (d, 1),
            "edge_head.b2": (1,),
            "flow_head.W1": (d, d),
            "flow_head.b1": (d,),
            "flow_head.W2": (d, 1),
            "flow_head.b2": (1,),
            "log_z": (),
        }
        for l in range(config.layers):
            for w in ("W1", "W2", "W3", "W4", "W5"):
                shapes[f"layer{l}.{w}"] = (d, d)
            for side in ("h", "e"):
                shapes[f"layer{l}.bn_{side}.gamma"] = (d,)
                shapes[f"layer{l}.bn_{side}.beta"] = (d,)
        return shapes

    @staticmethod
    def _buffer_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
        d = config.hidden
        shapes: dict[str, tuple[int, ...]] = {}
        for l in range(config.layers):
            for side in ("h", "e"):
                shapes[f"layer{l}.bn_{side}.mean"] = (d,)
                shapes[f"layer{l}.bn_{side}.var"] = (d,)
        return shapes

    @classmethod
    def init(cls, config: NetConfig | None = None, seed: int = 0) -> "PolicyNet":
        """Fresh network: weights uniform(+/- 1/sqrt(fan_in)), biases and log_z zero."""
        config = config or NetConfig()
        params: dict[str, Tensor] = {}
        for name, shape in sorted(cls._param_shapes(config).items()):
            gen = RandomStream(seed).child("init", name).generator()
            if name == "log_z":
                value = np.zeros(())
            elif name.endswith(".b") or ".b1" in name or ".b2" in name or name.endswith(".beta"):
                value = np.zeros(shape)
            elif name.endswith(".gamma"):
                value = np.ones(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                value = gen.uniform(-bound, bound, size=shape)
            params[name] = ad.parameter(value, name=name)
        buffers = {}
        for name, shape in sorted(cls._buffer_shapes(config).items()):
            buffers[name] = np.ones(shape) if name.endswith(".var") else np.zeros(shape)
        return cls(config, params, buffers)

    # -- checkpoint payload -----------------------------------------------------

    def to_payload(self) -> dict:
        return {
            "config": asdict(self.config),
            "params": {
                name: {"shape": list(t.value.shape), "data": t.value.reshape(-1).tolist()}
                for name, t in sorted(self.params.items())
            },
            "buffers": {
                name: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                for name, v in sorted(self.buffers.items())
            },
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "PolicyNet":
        config = NetConfig(**payload["config"])
        net = cls.init(config, seed=0)
        for name, t in net.params.items():
            if name not in payload["params"]:
                raise ShapeError(f"checkpoint missing parameter {name}")
            entry = payload["params"][name]
            if tuple(entry["shape"]) != t.value.shape:
                raise ShapeError(
                    f"parameter {name}: checkpoint shape {tuple(entry['shape'])} "
                    f"!= expected {t.value.shape}"
                )
            t.value = np.asarray(entry["data"], dtype=np.float64).reshape(t.value.shape)
        for name, v in net.buffers.items():
            entry = payload["buffers"][name]
            if tuple(entry["shape"]) != v.shape:
                raise ShapeError(f"buffer {name}: shape mismatch")
            net.buffers[name] = np.asarray(entry["data"], dtype=np.float64).reshape(v.shape)
        return net

    @property
    def log_z(self) -> Tensor:
        return self.params["log_z"]


def _normalize(net: PolicyNet, x: Tensor, prefix: str, training: bool) -> Tensor:
    cfg = net.config
    gamma = net.params[f"{prefix}.gamma"]
    beta = net.params[f"{prefix}.beta"]
    if cfg.norm == "layer":
        mu = ad.tmean(x, axis=1, keepdims=True)
        xc = x - mu
        var = ad.tmean(xc * xc, axis=1, keepdims=True)
        xn = xc / ad.sqrt(var + cfg.bn_eps)
    elif training:
        mu = ad.tmean(x, axis=0, keepdims=True)
        xc = x - mu
        var = ad.tmean(xc * xc, axis=0, keepdims=True)
        xn = xc / ad.sqrt(var + cfg.bn_eps)
        m = cfg.bn_momentum
        net.buffers[f"{prefix}.mean"] = (
            (1 - m) * net.buffers[f"{prefix}.mean"] + m * mu.value.reshape(-1)
        )
        net.buffers[f"{prefix}.var"] = (
            (1 - m) * net.buffers[f"{prefix}.var"] + m * var.value.reshape(-1)
        )
    else:
        mean = net.buffers[f"{prefix}.mean"]
        var = net.buffers[f"{prefix}.var"]
        xn = (x - mean) * (1.0 / np.sqrt(var + cfg.bn_eps))
    return xn * gamma + beta


def _edge_mlp(net: PolicyNet, e: Tensor) -> Tensor:
    p = net.params
    hidden = ad.silu(e @ p["edge_head.W1"] + p["edge_head.b1"])
    return hidden @ p["edge_head.W2"] + p["edge_head.b2"]


def gnn_forward(
    net: PolicyNet, features: FeatureSet, graph: SparseGraph, training: bool = False
) -> PolicyOutput:
    """Run the message-passing stack; returns edge logits and node embeddings."""
    cfg = net.config
    if features.node_dim != cfg.node_feat_dim or features.edge_dim != cfg.edge_feat_dim:
        raise ParameterError("feature dimensions do not match the network config")
    if features.node_feats.shape[0] != graph.n or features.edge_feats.shape[0] != graph.n_edges:
        raise ParameterError("feature counts do not match the graph")
    p = net.params
    src = graph.edge_index[:, 0]
    dst = graph.edge_index[:, 1]
    n, deg, d = graph.n, graph.degree, cfg.hidden

    h = ad.constant(features.node_feats) @ p["node_in.W"] + p["node_in.b"]
    e = ad.constant(features.edge_feats) @ p["edge_in.W"] + p["edge_in.b"]
    for l in range(cfg.layers):
        msg = ad.sigmoid(e) * ad.index_select(h @ p[f"layer{l}.W2"], dst)
        agg = ad.tmean(ad.reshape(msg, (n, deg, d)), axis=1)
        h_pre = h @ p[f"layer{l}.W1"] + agg
        h_new = h + ad.silu(_normalize(net, h_pre, f"layer{l}.bn_h", training))
        e_pre = (
            e @ p[f"layer{l}.W3"]
            + ad.index_select(h @ p[f"layer{l}.W4"], src)
            + ad.index_select(h @ p[f"layer{l}.W5"], dst)
        )
        e_new = e + ad.silu(_normalize(net, e_pre, f"layer{l}.bn_e", training))
        h, e = h_new, e_new
        if not (np.isfinite(h.value).all() and np.isfinite(e.value).all()):
            raise NumericError(f"non-finite activations after layer {l}")
    logits = ad.reshape(_edge_mlp(net, e), (graph.n_edges,))
    if not np.isfinite(logits.value).all():
        raise NumericError("non-finite edge logits")
    return PolicyOutput(edge_logits=logits, node_embeds=h)


def flow_node_values(net: PolicyNet, node_embeds: Tensor) -> Tensor:
    """Per-node log-flow contributions from the 2-layer ReLU flow head; shape (n,)."""
    p = net.params
    hidden = ad.relu(node_embeds @ p["flow_head.W1"] + p["flow_head.b1"])
    out = hidden @ p["flow_head.W2"] + p["flow_head.b2"]
    return ad.reshape(out, (node_embeds.value.shape[0],))


def flow_value(net: PolicyNet, visited: list[int], node_embeds: Tensor) -> Tensor:
    """State log-flow: mean of flow-head outputs over the visited node list."""
    if len(visited) == 0:
        raise ParameterError("flow_value needs a non-empty visited list")
    phi = flow_node_values(net, node_embeds)
    return ad.tmean(ad.index_select(phi, np.asarray(visited, dtype=np.int64)))


def log_flow_prefixes(net: PolicyNet, node_embeds: Tensor, node_seq: list[int]) -> Tensor:
    """log F for every prefix of a node sequence (duplicates kept); shape (len(seq),)."""
    if len(node_seq) == 0:
        raise ParameterError("empty node sequence")
    phi = flow_node_values(net, node_embeds)
    picked = ad.index_select(phi, np.asarray(node_seq, dtype=np.int64))
    counts = np.arange(1, len(node_seq) + 1, dtype=np.float64)
    return ad.cumsum(picked) * (1.0 / counts)


def virtual_edge_logit(net: PolicyNet, dist: float) -> Tensor:
    """Logit for an edge absent from the sparse graph, from its raw distance.

    Projects the distance through the edge input projection and the edge MLP
    (the message-passing layers contribute nothing for an unseen edge).
    """
    p = net.params
    e0 = ad.constant(np.array([[float(dist)]])) @ p["edge_in.W"] + p["edge_in.b"]
    return ad.take(ad.reshape(_edge_mlp(net, e0), (1,)), 0)
