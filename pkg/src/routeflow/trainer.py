"""Training loop: per-epoch instance generation, rollouts, hybrid loss, optimizer.

Epoch numbering is fence-post: row 0 of the metrics is an evaluation-only
baseline of the untrained network, training epochs run 1..epochs, and the
loss weight schedule lambda(e) = start + (end - start) * e / epochs hits its
endpoints exactly at epoch 0 and the final epoch.

Instances are generated fresh every epoch from seeds derived of (config
seed, epoch, index), so runs are reproducible and independent of scheduling.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import balance
from .autodiff import Tensor, clip_grads_, zero_grads
from .errors import NumericError, ParameterError, ShapeError
from .graphkit import build_features, default_k, knn_sparsify
from .instances import CVRP, TSP, VrpInstance, generate_cvrp, generate_tsp
from .network import NetConfig, PolicyNet, gnn_forward
from .rng import RandomStream, derive_seed
from .sampler import greedy_decode, sample_trajectories

SGD = "sgd"
ADAM = "adam"
ADAMW = "adamw"

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    kind: str = CVRP
    n_nodes: int = 20                  # customers for cvrp, nodes for tsp
    epochs: int = 30
    instances_per_epoch: int = 8
    h: int = 20                        # rollouts per instance
    lambda_start: float = 1.0
    lambda_end: float = 1.0
    tb_weight: float = 1.0
    energy_sign: str = balance.PAPER_LITERAL
    reward_beta: float = balance.DEFAULT_REWARD_BETA
    lr: float = 5e-4
    optimizer: str = ADAMW
    weight_decay: float = 0.01
    seed: int = 0
    layers: int = 3
    hidden: int = 16
    k: int | None = None               # sparsity; None -> default_k
    grad_clip: float = 10.0
    capacity: int = 50
    demand_lo: int = 1
    demand_hi: int = 9
    temperature: float = 1.0
    checkpoint_every: int = 10
    stable_timing: bool = False        # write 0 in the seconds column (reproducible files)

    def __post_init__(self):
        if self.epochs < 1 or self.h < 1 or self.instances_per_epoch < 1:
            raise ParameterError("epochs, h and instances_per_epoch must be positive")
        if self.lambda_start < 0 or self.lambda_end < 0 or self.tb_weight < 0:
            raise ParameterError("loss weights must be non-negative")
        if self.lr <= 0:
            raise ParameterError("learning rate must be positive")
        if self.optimizer not in (SGD, ADAM, ADAMW):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")
        if self.kind not in (CVRP, TSP):
            raise ParameterError(f"unknown problem kind {self.kind!r}")


def lambda_at(epoch: int, epochs: int, start: float, end: float) -> float:
    """Linear loss-weight schedule over epoch indices 0..epochs (inclusive)."""
    if epochs < 1:
        raise ParameterError("epochs must be positive")
    return start + (end - start) * (epoch / epochs)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    kind: str,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
    state: OptimizerState,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """In-place parameter update; adamw decouples weight decay from the moments."""
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        if kind == SGD:
            if weight_decay:
                g = g + weight_decay * p.value
            p.value = p.value - lr * g
            continue
        if kind == ADAM and weight_decay:
            g = g + weight_decay * p.value
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m[...] = beta1 * m + (1 - beta1) * g
        v[...] = beta2 * v + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** state.t)
        v_hat = v / (1 - beta2 ** state.t)
        new_value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        if kind == ADAMW and weight_decay:
            new_value = new_value - lr * weight_decay * p.value
        p.value = new_value
    return state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: PolicyNet, config: TrainConfig | None, path: str | Path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "net": net.to_payload(),
        "train_config": asdict(config) if config is not None else None,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[PolicyNet, TrainConfig | None]:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ShapeError(f"unsupported checkpoint version {payload.get('version')!r}")
    net = PolicyNet.from_payload(payload["net"])
    cfg = payload.get("train_config")
    return net, (TrainConfig(**cfg) if cfg else None)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

METRICS_COLUMNS = (
    "epoch", "mean_len_sampled", "mean_len_greedy", "tb", "db", "hybrid", "logZ", "seconds"
)


@dataclass
class TrainMetrics:
    rows: list[dict] = field(default_factory=list)

    def append(self, **kwargs) -> None:
        self.rows.append({col: kwargs[col] for col in METRICS_COLUMNS})

    def to_csv(self) -> str:
        lines = [",".join(METRICS_COLUMNS)]
        for row in self.rows:
            cells = []
            for col in METRICS_COLUMNS:
                v = row[col]
                cells.append(str(v) if isinstance(v, int) else format(v, ".10g"))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _epoch_instances(config: TrainConfig, epoch: int) -> list[VrpInstance]:
    out = []
    for i in range(config.instances_per_epoch):
        seed = derive_seed(config.seed, "epoch", epoch, "instance", i)
        if config.kind == CVRP:
            out.append(
                generate_cvrp(
                    config.n_nodes, seed, config.capacity, config.demand_lo, config.demand_hi
                )
            )
        else:
            out.append(generate_tsp(config.n_nodes, seed))
    return out


def _batch_pass(net: PolicyNet, config: TrainConfig, instances, lam: float, stream: RandomStream):
    """Forward + loss over one epoch's instances; returns (hybrid tensor, stats)."""
    total_hybrid = None
    tb_vals, db_vals, sampled_lengths, greedy_lengths = [], [], [], []
    for idx, instance in enumerate(instances):
        graph = knn_sparsify(instance, config.k)
        feats = build_features(instance, graph)
        output = gnn_forward(net, feats, graph, training=True)
        trajs = sample_trajectories(
            net, instance, graph, config.h, stream.child("sample", idx),
            temperature=config.temperature, output=output,
        )
        balance.fill_state_records(net, output, trajs, config.energy_sign)
        lengths = [t.length for t in trajs]
        rewards = balance.reward_transform(lengths, config.reward_beta)
        losses = balance.build_loss_graph(
            net, output, instance, graph, trajs, rewards,
            lam=lam, decomp_mode=balance.default_decomp_mode(instance.kind),
            temperature=config.temperature, tb_weight=config.tb_weight,
        )
        total_hybrid = losses.hybrid if total_hybrid is None else total_hybrid + losses.hybrid
        tb_vals.append(float(losses.tb.value))
        db_vals.append(float(losses.db.value))
        sampled_lengths.extend(lengths)
        greedy_lengths.append(greedy_decode(net, instance, graph).length)
    hybrid_mean = total_hybrid * (1.0 / len(instances))
    stats = {
        "tb": float(np.mean(tb_vals)),
        "db": float(np.mean(db_vals)),
        "hybrid": float(hybrid_mean.value),
        "mean_len_sampled": float(np.mean(sampled_lengths)),
        "mean_len_greedy": float(np.mean(greedy_lengths)),
    }
    return hybrid_mean, stats


def train(config: TrainConfig, out_dir: str | Path | None = None) -> tuple[PolicyNet, TrainMetrics]:
    """Run the full loop; optionally write metrics.csv and checkpoints to out_dir."""
    net = PolicyNet.init(
        NetConfig(layers=config.layers, hidden=config.hidden), seed=config.seed
    )
    stream = RandomStream(config.seed)
    state = OptimizerState()
    metrics = TrainMetrics()
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for epoch in range(config.epochs + 1):
        start_time = time.perf_counter()
        lam = lambda_at(epoch, config.epochs, config.lambda_start, config.lambda_end)
        instances = _epoch_instances(config, epoch)
        hybrid, stats = _batch_pass(net, config, instances, lam, stream.child("epoch", epoch))
        if not math.isfinite(stats["hybrid"]):
            _dump_diagnostics(net, config, epoch, out_path)
            raise NumericError(
                f"non-finite loss at epoch {epoch} (seed {config.seed}); diagnostics dumped"
            )
        if epoch > 0:
            zero_grads(net.params)
            hybrid.backward()
            clip_grads_(net.params, config.grad_clip)
            grads = {name: t.grad for name, t in net.params.items() if t.grad is not None}
            optimizer_step(
                config.optimizer, net.params, grads, config.lr, state,
                weight_decay=config.weight_decay,
            )
        seconds = 0.0 if config.stable_timing else time.perf_counter() - start_time
        metrics.append(
            epoch=epoch,
            mean_len_sampled=stats["mean_len_sampled"],
            mean_len_greedy=stats["mean_len_greedy"],
            tb=stats["tb"],
            db=stats["db"],
            hybrid=stats["hybrid"],
            logZ=float(net.log_z.value),
            seconds=seconds,
        )
        if out_path is not None and epoch > 0 and (
            epoch % config.checkpoint_every == 0 or epoch == config.epochs
        ):
            save_checkpoint(net, config, out_path / f"checkpoint-{epoch:04d}.json")
    if out_path is not None:
        metrics.write(out_path / "metrics.csv")
        save_checkpoint(net, config, out_path / "checkpoint-final.json")
    return net, metrics


def _dump_diagnostics(net: PolicyNet, config: TrainConfig, epoch: int, out_path: Path | None):
    if out_path is None:
        return
    dump = {
        "epoch": epoch,
        "config": asdict(config),
        "net": net.to_payload(),
    }
    (out_path / "diverged-dump.json").write_text(json.dumps(dump, sort_keys=True))
