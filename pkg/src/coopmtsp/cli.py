"""Command line front end for datasets, training, planning, and benchmarks.

Every subcommand shares the --config/--seed/--out flags. Failures exit
nonzero after printing a single machine-readable line to stderr:
``error {"type": ..., "message": ...}``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
import typing
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import (
    ABLATION_AXES,
    AblationConfig,
    IoFailure,
    MissingCheckpoint,
    SamplingExhausted,
    UnsupportedAxis,
    emit_plots,
    emit_report,
    generate_dataset,
    load_dataset,
    run_ablation,
    run_benchmark,
    save_dataset,
    single_shot,
)
from .costmodel import CostOracle, KinematicParams, OracleVariant
from .nn import grad_check
from .policy import (
    FastPolicy,
    PolicyConfig,
    PolicyParams,
    build_observation,
    collate,
    policy_forward,
)
from .predictor import (
    PredictorConfig,
    PredictorSource,
    TrainPredictorConfig,
    evaluate_predictor,
    load_predictor,
    sample_predictor_dataset,
    save_predictor,
    train_predictor,
)
from .solvers import PLANNER_NAMES
from .train import (
    TrainConfig,
    load_policy,
    train_config_from_config,
    train_policy,
)

__all__ = ["main"]


ORACLE_CHOICES = tuple(v.value for v in OracleVariant)


def _fail(exc: BaseException) -> int:
    line = json.dumps({"type": type(exc).__name__, "message": str(exc)})
    print(f"error {line}", file=sys.stderr)
    return 2


def _policy_config_from(path: str | None) -> PolicyConfig:
    """Architecture overrides from an INI [policy] section; defaults otherwise."""
    if path is None:
        return PolicyConfig()
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    if not cp.has_section("policy"):
        return PolicyConfig()
    fields = typing.get_type_hints(PolicyConfig)
    kwargs: dict = {}
    for key, raw in cp["policy"].items():
        if key not in fields:
            raise ValueError(f"unknown [policy] key: {key}")
        kind = fields[key]
        if kind is int:
            kwargs[key] = int(raw)
        elif kind is float:
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw.strip()
    return PolicyConfig(**kwargs)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    ds = generate_dataset(args.n, args.count, _seed(args))
    path = save_dataset(ds, _out_dir(args))
    print(f"dataset {path} n={ds.n} count={ds.count} seed={ds.seed}")
    return 0


def cmd_train_predictor(args) -> int:
    seed = _seed(args)
    out = _out_dir(args)
    variant = OracleVariant(args.oracle)
    oracle = CostOracle(KinematicParams(variant=variant))
    model_config = (
        PredictorConfig(hidden=64, layers=2) if args.small else PredictorConfig()
    )
    data = sample_predictor_dataset(args.samples, oracle, seed=seed)
    model = train_predictor(
        data,
        TrainPredictorConfig(epochs=args.epochs, seed=seed),
        model_config=model_config,
    )
    held_out = sample_predictor_dataset(args.eval_samples, oracle, seed=seed + 7919)
    metrics = evaluate_predictor(model, held_out)
    constants = {
        k: (v.value if isinstance(v, OracleVariant) else v)
        for k, v in dataclasses.asdict(oracle.params).items()
    }
    path = save_predictor(
        out / "predictor.npz",
        model,
        meta={
            "oracle_variant": variant.value,
            "params": constants,
            "dataset_seed": seed,
            "train_samples": args.samples,
            "epochs": args.epochs,
            "metrics": metrics,
        },
    )
    print(
        f"predictor {path} mask_accuracy={metrics['mask_accuracy']:.4f} "
        f"time_error={metrics['mean_relative_time_error']:.4f}"
    )
    return 0


def cmd_train_policy(args) -> int:
    config = (
        train_config_from_config(args.config) if args.config else TrainConfig()
    )
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.n is not None:
        config = replace(config, n=args.n)
    if args.iterations is not None:
        config = replace(config, iterations=args.iterations)
    policy_config = _policy_config_from(args.config)
    out = _out_dir(args)
    checkpoint = out / f"policy_n{config.n}.npz"
    report = out / f"policy_n{config.n}_report.csv"

    def progress(row: dict) -> None:
        line = (
            f"it {row['iteration']:4d} cost {row['mean_cost']:.3f} "
            f"succ {row['success_rate']:.2f}"
        )
        if "val_cost" in row:
            line += f" val {row['val_cost']:.3f} rate {row['val_rate']:.2f}"
        print(line, flush=True)

    train_policy(
        config,
        policy_config=policy_config,
        checkpoint_path=checkpoint,
        report_path=report,
        resume=args.resume,
        progress=progress,
    )
    print(f"policy {checkpoint} report {report}")
    return 0


def _matrix_source_for(args, params: KinematicParams):
    if args.matrix_source == "oracle":
        return CostOracle(params)
    if not args.predictor:
        raise MissingCheckpoint("--matrix-source predictor needs --predictor")
    model, _ = load_predictor(args.predictor)
    return PredictorSource(model)


def cmd_plan(args) -> int:
    ds = load_dataset(args.dataset)
    if not 0 <= args.index < ds.count:
        raise ValueError(f"index {args.index} outside dataset of {ds.count}")
    params = KinematicParams()
    fast = None
    if args.method == "policy":
        if not args.policy:
            raise MissingCheckpoint("method policy needs --policy")
        policy_params, _ = load_policy(args.policy)
        fast = FastPolicy(policy_params)
    shot = single_shot(
        args.method,
        ds.graphs[args.index],
        params,
        source=_matrix_source_for(args, params),
        fast_policy=fast,
        step_back=args.step_back == "on",
        budget=args.budget,
    )
    print(
        json.dumps(
            {
                "method": shot.method,
                "index": args.index,
                "success": shot.success,
                "cost": shot.cost if np.isfinite(shot.cost) else None,
                "plan_time_s": shot.plan_time_s,
                "reverts": shot.reverts,
            }
        )
    )
    return 0 if shot.success else 1


def cmd_bench(args) -> int:
    ds = load_dataset(args.dataset)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    rows = run_benchmark(
        methods,
        ds,
        matrix_source=args.matrix_source,
        predictor_path=args.predictor or None,
        policy_path=args.policy or None,
        step_back=args.step_back == "on",
        budget=args.budget,
        p_fail=args.p_fail,
        failure_seed=_seed(args),
        progress=(
            (lambda shot: print(f"{shot.method} {shot.index}", flush=True))
            if args.verbose
            else None
        ),
    )
    out = _out_dir(args)
    path = emit_report(rows, args.format, out / f"benchmark.{args.format}")
    for r in rows:
        print(
            f"{r.method} n={r.n} success_rate={r.success_rate:.2f} "
            f"mean_cost={r.mean_cost:.4f} mean_plan_time_s={r.mean_plan_time_s:.4f}"
        )
    if args.plots:
        for p in emit_plots(rows, out):
            print(f"plot {p}")
    print(f"report {path}")
    return 0


def cmd_ablate(args) -> int:
    ds = load_dataset(args.dataset)
    config = AblationConfig(
        iterations=args.iterations,
        episodes_per_iter=args.episodes,
        seed=_seed(args),
        predictor_samples=args.samples,
        predictor_epochs=args.epochs,
        budget=args.budget,
    )
    rows = run_ablation(
        args.axis,
        ds,
        config,
        progress=lambda row: print(f"variant {row.method} done", flush=True),
    )
    out = _out_dir(args)
    path = emit_report(rows, args.format, out / f"ablation_{args.axis}.{args.format}")
    for r in rows:
        print(
            f"{r.method} n={r.n} success_rate={r.success_rate:.2f} "
            f"mean_cost={r.mean_cost:.4f}"
        )
    print(f"report {path}")
    return 0


def cmd_grad_check(args) -> int:
    """Tape-vs-numeric gradients on the policy and predictor losses."""
    seed = _seed(args)
    params = KinematicParams()
    graph = generate_dataset(2, 1, seed=seed).graphs[0]
    oracle = CostOracle(params)
    tiny = PolicyConfig(
        node_dim=16, coop_dim=8, heads=2, node_layers=1, coop_layers=1,
        gen_layers=1, head_hidden=16, value_hidden=16,
    )
    policy = PolicyParams(tiny, seed=seed)
    batch = collate([build_observation(graph, oracle.matrix(graph))])
    ii, jj = np.nonzero(batch.joint_mask[0])
    i, j = ii[:1], jj[:1]

    def policy_loss():
        dist, value = policy_forward(policy, batch)
        return (dist.log_prob(i, j) + 0.5 * value ** 2.0 + 0.01 * dist.entropy()).sum()

    results = {"policy": grad_check(policy_loss, policy.store, max_entries=args.max_entries, seed=seed)}

    model_config = PredictorConfig(hidden=16, layers=2)
    from .nn import ParameterStore, as_tensor, bce_with_logits
    from .predictor import PredictorModel, featurize

    # float64 store: the shipping float32 weights are too coarse for
    # central differences at the checker's eps
    model = PredictorModel(model_config, store=ParameterStore(seed, dtype=np.float64))
    data = sample_predictor_dataset(8, oracle, seed=seed)
    X = as_tensor(featurize(data.poses, data.bbox))
    targets = np.stack([data.feasible, data.feasible], axis=1).astype(float)

    def predictor_loss():
        out = model.forward(X)
        return bce_with_logits(out[:, :2], targets) + (out[:, 2:] ** 2.0).mean()

    results["predictor"] = grad_check(
        predictor_loss, model.store, max_entries=args.max_entries, seed=seed
    )

    ok = True
    for name, res in results.items():
        status = "ok" if res.ok else "FAIL"
        print(f"{name} max_rel_error={res.max_rel_error:.2e} {status}")
        ok = ok and res.ok
    if not ok:
        raise RuntimeError("gradient check failed")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out", help="output directory")

    parser = argparse.ArgumentParser(
        prog="coopmtsp",
        description="Cooperative two-arm rearrangement: data, training, planning, benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="sample an instance dataset")
    p.add_argument("--n", type=int, required=True, help="tasks per instance (even)")
    p.add_argument("--count", type=int, default=100)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-predictor", parents=[common], help="train the cost predictor")
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--eval-samples", type=int, default=10_000)
    p.add_argument("--oracle", choices=ORACLE_CHOICES, default="kinematic")
    p.add_argument("--small", action="store_true", help="2-layer 64-wide variant")
    p.set_defaults(fn=cmd_train_predictor)

    p = sub.add_parser("train-policy", parents=[common], help="train the allocator policy")
    p.add_argument("--n", type=int, default=None, help="override config n")
    p.add_argument("--iterations", type=int, default=None, help="override config iterations")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train_policy)

    p = sub.add_parser("plan", parents=[common], help="plan one instance, print JSON")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--method", choices=PLANNER_NAMES, default="greedy")
    p.add_argument("--policy", default=None, help="policy checkpoint")
    p.add_argument("--predictor", default=None, help="predictor checkpoint")
    p.add_argument("--matrix-source", choices=("oracle", "predictor"), default="oracle")
    p.add_argument("--step-back", choices=("on", "off"), default="on")
    p.add_argument("--budget", type=int, default=50)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("bench", parents=[common], help="single-shot benchmark over a dataset")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--methods", default="exhaustive,greedy,matching")
    p.add_argument("--policy", default=None)
    p.add_argument("--predictor", default=None)
    p.add_argument("--matrix-source", choices=("oracle", "predictor"), default="oracle")
    p.add_argument("--step-back", choices=("on", "off"), default="on")
    p.add_argument("--budget", type=int, default=50)
    p.add_argument("--p-fail", type=float, default=0.0, help="simulated per-step failure rate")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--plots", action="store_true", help="emit cost/time SVG plots")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", parents=[common], help="run one ablation axis")
    p.add_argument("--axis", choices=sorted(ABLATION_AXES), required=True)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--samples", type=int, default=20_000, help="predictor-size axis")
    p.add_argument("--epochs", type=int, default=10, help="predictor-size axis")
    p.add_argument("--budget", type=int, default=50)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("grad-check", parents=[common], help="verify tape gradients numerically")
    p.add_argument("--max-entries", type=int, default=8, help="probed entries per parameter")
    p.set_defaults(fn=cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (
        MissingCheckpoint,
        UnsupportedAxis,
        IoFailure,
        SamplingExhausted,
        FileNotFoundError,
        ValueError,
        RuntimeError,
    ) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
