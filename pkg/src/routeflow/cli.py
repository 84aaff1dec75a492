"""Command-line interface.

Exit codes: 0 on success, 1 on a failed verification or runtime error,
2 on usage errors (argparse default).  --threads parallelizes evaluation
across instances; instance-level results are identical at any thread count,
only wall times differ.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import workbench
from .errors import RouteflowError
from .instances import (
    CVRP,
    TSP,
    VrpInstance,
    dataset_from_json,
    dataset_to_json,
    generate_cvrp,
    generate_tsp,
    parse_tsplib,
)
from .network import PolicyNet
from .trainer import TrainConfig, load_checkpoint, train


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    p.add_argument("--kind", choices=[CVRP, TSP], default=defaults.kind)
    p.add_argument("--n-nodes", type=int, default=defaults.n_nodes)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--instances-per-epoch", type=int, default=defaults.instances_per_epoch)
    p.add_argument("--h", type=int, default=defaults.h, help="rollouts per instance")
    p.add_argument("--lambda-start", type=float, default=defaults.lambda_start)
    p.add_argument("--lambda-end", type=float, default=defaults.lambda_end)
    p.add_argument("--tb-weight", type=float, default=defaults.tb_weight)
    p.add_argument("--energy-sign", choices=["paper_literal", "negated"],
                   default=defaults.energy_sign)
    p.add_argument("--reward-beta", type=float, default=defaults.reward_beta)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--optimizer", choices=["sgd", "adam", "adamw"], default=defaults.optimizer)
    p.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--layers", type=int, default=defaults.layers)
    p.add_argument("--hidden", type=int, default=defaults.hidden)
    p.add_argument("--k", type=int, default=None, help="k-NN sparsity (default |V|/5, floor 5)")
    p.add_argument("--grad-clip", type=float, default=defaults.grad_clip)
    p.add_argument("--capacity", type=int, default=defaults.capacity)
    p.add_argument("--demand-lo", type=int, default=defaults.demand_lo)
    p.add_argument("--demand-hi", type=int, default=defaults.demand_hi)
    p.add_argument("--temperature", type=float, default=defaults.temperature)
    p.add_argument("--checkpoint-every", type=int, default=defaults.checkpoint_every)
    p.add_argument("--stable-timing", action="store_true",
                   help="write 0 in the seconds column for byte-reproducible metrics")


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    kwargs = {k: v for k, v in vars(args).items() if k in names}
    return TrainConfig(**kwargs)


def _load_net(args: argparse.Namespace) -> PolicyNet:
    if args.checkpoint:
        net, _cfg = load_checkpoint(args.checkpoint)
        return net
    return PolicyNet.init(seed=args.init_seed)


def _load_dataset(path: str) -> list[VrpInstance]:
    return dataset_from_json(Path(path).read_text())


def _load_baselines(args: argparse.Namespace, instances) -> workbench.BaselineSolutions:
    if getattr(args, "baselines", None):
        return workbench.BaselineSolutions.from_json(Path(args.baselines).read_text())
    return workbench.built_in_baseline(instances)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routeflow",
        description="Routing policies trained with combined trajectory- and transition-level balance losses",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset JSON")
    p.add_argument("--kind", choices=[CVRP, TSP], default=CVRP)
    p.add_argument("--n", type=int, required=True, help="customers (cvrp) or nodes (tsp)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--capacity", type=int, default=50)
    p.add_argument("--demand-lo", type=int, default=1)
    p.add_argument("--demand-hi", type=int, default=9)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("parse", help="convert a TSPLIB/CVRPLib file to instance JSON")
    p.add_argument("file")
    p.add_argument("--normalize", action="store_true",
                   help="rescale coordinates into the unit square")
    p.add_argument("-o", "--output", default=None)

    p = sub.add_parser("train", help="train a policy")
    _add_train_flags(p)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("solve", help="solve one instance")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--init-seed", type=int, default=0,
                   help="fresh-network seed when no checkpoint is given")
    p.add_argument("--instance", default=None, help="instance JSON file")
    p.add_argument("--dataset", default=None)
    p.add_argument("--index", type=int, default=0, help="instance index within --dataset")
    p.add_argument("--mode", choices=workbench.DECODE_MODES, default="greedy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--n-samples", type=int, default=20)
    p.add_argument("--aco-iterations", type=int, default=10)
    p.add_argument("--n-ants", type=int, default=20)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--dump", default=None, help="write the trajectory JSON here")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=workbench.DECODE_MODES, default="greedy")
    p.add_argument("--baselines", default=None, help="baseline JSON (default: built-in nn+2opt)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-o", "--output", default=None, help="report CSV path")

    p = sub.add_parser("ablate-balance", help="train and compare DB/TB/HB variants")
    _add_train_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--baselines", default=None)
    p.add_argument("-o", "--output", default=None)

    p = sub.add_parser("ablate-decode", help="decode-variant grid for a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--dataset", required=True)
    p.add_argument("--baselines", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("-o", "--output", default=None)

    p = sub.add_parser("verify", help="run the verification suite")
    p.add_argument("--fast", action="store_true", help="reduced sweep sizes")

    return parser


def _cmd_gen(args) -> int:
    instances = []
    for i in range(args.count):
        seed = args.seed + i
        if args.kind == CVRP:
            instances.append(
                generate_cvrp(args.n, seed, args.capacity, args.demand_lo, args.demand_hi)
            )
        else:
            instances.append(generate_tsp(args.n, seed))
    Path(args.output).write_text(dataset_to_json(instances))
    print(f"wrote {len(instances)} instances to {args.output}")
    return 0


def _cmd_parse(args) -> int:
    instance = parse_tsplib(Path(args.file).read_text(), normalize=args.normalize)
    text = instance.to_json()
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {instance.name} ({instance.kind}, {instance.n_nodes} nodes) to {args.output}")
    else:
        print(text)
    return 0


def _cmd_train(args) -> int:
    config = _config_from_args(args)
    _net, metrics = train(config, out_dir=args.out_dir)
    last = metrics.rows[-1]
    print(
        f"trained {config.epochs} epochs; final greedy length "
        f"{last['mean_len_greedy']:.4f}, hybrid loss {last['hybrid']:.4f}"
    )
    print(f"metrics and checkpoints in {args.out_dir}")
    return 0


def _cmd_solve(args) -> int:
    if (args.instance is None) == (args.dataset is None):
        print("solve needs exactly one of --instance or --dataset", file=sys.stderr)
        return 2
    if args.instance:
        instance = VrpInstance.from_json(Path(args.instance).read_text())
    else:
        instance = _load_dataset(args.dataset)[args.index]
    net = _load_net(args)
    traj, seconds = workbench.solve_instance(
        net, instance, args.mode, seed=args.seed, k=args.k, n_samples=args.n_samples,
        aco_iterations=args.aco_iterations, n_ants=args.n_ants, temperature=args.temperature,
    )
    print(f"instance {instance.name} mode {args.mode} seed {args.seed}")
    print("route: " + " ".join(str(x) for x in traj.nodes))
    print(f"length: {format(traj.length, '.10g')}")
    print(f"decode seconds: {seconds:.4f}")
    if args.dump:
        Path(args.dump).write_text(traj.to_json())
    return 0


def _cmd_eval(args) -> int:
    instances = _load_dataset(args.dataset)
    baselines = _load_baselines(args, instances)
    net = _load_net(args)
    report = workbench.evaluate(
        net, instances, args.mode, baselines, seed=args.seed, threads=args.threads
    )
    _emit_report(report, args.output)
    return 0


def _cmd_ablate_balance(args) -> int:
    config = _config_from_args(args)
    instances = _load_dataset(args.dataset)
    baselines = _load_baselines(args, instances)
    decode_mode = "depot_guided" if instances[0].kind == CVRP else "greedy"
    report = workbench.ablate_balance(config, instances, baselines, decode_mode=decode_mode)
    _emit_report(report, args.output)
    return 0


def _cmd_ablate_decode(args) -> int:
    instances = _load_dataset(args.dataset)
    baselines = _load_baselines(args, instances)
    net = _load_net(args)
    report = workbench.ablate_decoding(net, instances, baselines, seeds=tuple(args.seeds))
    _emit_report(report, args.output)
    return 0


def _emit_report(report: workbench.EvalReport, output: str | None) -> None:
    print(f"reference: {report.reference_label}")
    for agg in report.aggregate():
        print(
            f"{agg['method']:>8}  size {agg['size']:>5}  mean objective "
            f"{agg['mean_objective']:.4f}  mean gap {agg['mean_gap_pct']:.2f}%  "
            f"mean seconds {agg['mean_seconds']:.4f}  ({agg['count']} rows)"
        )
    for flag in report.expectation_flags:
        print(f"warning: {flag}")
    if output:
        report.write(output)
        print(f"wrote {output}")


def _cmd_verify(args) -> int:
    report = workbench.run_verification(fast=args.fast)
    print(report.format())
    return 0 if report.ok else 1


_COMMANDS = {
    "gen": _cmd_gen,
    "parse": _cmd_parse,
    "train": _cmd_train,
    "solve": _cmd_solve,
    "eval": _cmd_eval,
    "ablate-balance": _cmd_ablate_balance,
    "ablate-decode": _cmd_ablate_decode,
    "verify": _cmd_verify,
}


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except RouteflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
