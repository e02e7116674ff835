"""Datasets, the benchmark harness, and report emission.

Instances are rejection-sampled: uniform table positions with a minimum
pairwise separation, then a solvability screen (greedy with step-back under
the default oracle must finish with revert headroom). Unscreened sampling
produces instances no planner can complete, which would make success-rate
columns meaningless. Generation is deterministic per (n, seed, count):
every attempt draws from its own named stream.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    DepotState,
    JointAction,
    Pose,
    RearrangeTask,
    TABLE_BOUNDS,
    TaskStateGraph,
    build_state_graph,
    cumulative_cost,
    return_index,
)
from .costmodel import CostOracle, EpisodeEngine, FailureModel, KinematicParams
from .solvers import (
    PLANNER_NAMES,
    exhaustive_search,
    greedy_chooser,
    perfect_matching_plan,
    policy_chooser,
    simulate_plan,
    step_back_replan,
)

__all__ = [
    "Dataset",
    "MetricsRow",
    "ShotResult",
    "SamplingExhausted",
    "MissingCheckpoint",
    "UnsupportedAxis",
    "IoFailure",
    "MIN_SEPARATION",
    "ABLATION_AXES",
    "AblationConfig",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "instance_to_dict",
    "instance_from_dict",
    "single_shot",
    "run_benchmark",
    "aggregate_shots",
    "run_ablation",
    "emit_report",
    "load_report",
    "emit_plots",
]

MIN_SEPARATION = 0.06  # object edge: positions closer than this overlap
SCREEN_MARGIN = 25  # max reverts the screening solve may use (of the 50 budget)
SCREEN_ATTEMPTS = 500


class SamplingExhausted(RuntimeError):
    """Could not draw a valid instance within the attempt bound."""


class MissingCheckpoint(RuntimeError):
    """A benchmark method needs a trained model that is not on disk."""


class UnsupportedAxis(RuntimeError):
    """run_ablation got an axis outside the supported set."""


class IoFailure(RuntimeError):
    """A report or plot could not be written."""


@dataclass
class Dataset:
    n: int
    seed: int
    count: int
    graphs: list[TaskStateGraph]


# -- sampling ----------------------------------------------------------------


def _sample_points(rng, count: int, max_tries: int = 4000):
    (x0, x1), (y0, y1), _ = TABLE_BOUNDS
    pts: list[np.ndarray] = []
    for _ in range(max_tries):
        if len(pts) == count:
            return pts
        p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1), 0.0])
        if all(np.linalg.norm(p[:2] - q[:2]) >= MIN_SEPARATION for q in pts):
            pts.append(p)
    return pts if len(pts) == count else None


def _sample_instance(rng, n: int) -> TaskStateGraph | None:
    pts = _sample_points(rng, 2 * n)
    if pts is None:
        return None
    yaws = rng.uniform(-np.pi, np.pi, size=2 * n)
    tasks = [
        RearrangeTask(
            Pose(pts[2 * i], [0.0, 0.0, yaws[2 * i]]),
            Pose(pts[2 * i + 1], [0.0, 0.0, yaws[2 * i + 1]]),
        )
        for i in range(n)
    ]
    return build_state_graph(tasks)


def _passes_screen(graph: TaskStateGraph, params: KinematicParams, margin: int) -> bool:
    plan = step_back_replan(graph, greedy_chooser(CostOracle(params)), params)
    return plan.success and plan.reverts <= margin


def generate_dataset(
    n: int,
    count: int,
    seed: int,
    screen_params: KinematicParams | None = None,
    margin: int = SCREEN_MARGIN,
    attempts: int = SCREEN_ATTEMPTS,
) -> Dataset:
    """Draw ``count`` solvable instances of size ``n``, deterministically."""
    if n % 2:
        raise ValueError("task count must be even")
    if count < 1:
        raise ValueError("count must be positive")
    params = screen_params if screen_params is not None else KinematicParams()
    graphs: list[TaskStateGraph] = []
    for index in range(count):
        for attempt in range(attempts):
            rng = np.random.default_rng([seed, index, attempt])
            g = _sample_instance(rng, n)
            if g is not None and _passes_screen(g, params, margin):
                graphs.append(g)
                break
        else:
            raise SamplingExhausted(
                f"instance {index} of (n={n}, seed={seed}): no valid draw in {attempts} attempts"
            )
    return Dataset(n=n, seed=seed, count=count, graphs=graphs)


# -- serialization -----------------------------------------------------------


def _pose_dict(pose: Pose) -> dict:
    return {"pos": [float(v) for v in pose.pos], "rpy": [float(v) for v in pose.rpy]}


def _pose_from(d: dict) -> Pose:
    return Pose(d["pos"], d["rpy"])


def instance_to_dict(graph: TaskStateGraph) -> dict:
    return {
        "n": graph.n,
        "tasks": [
            {"pick": _pose_dict(t.pick), "place": _pose_dict(t.place)} for t in graph.tasks
        ],
        "depots": [_pose_dict(d.initial) for d in graph.depots],
    }


def instance_from_dict(d: dict) -> TaskStateGraph:
    tasks = [RearrangeTask(_pose_from(t["pick"]), _pose_from(t["place"])) for t in d["tasks"]]
    depots = [DepotState(_pose_from(p), _pose_from(p)) for p in d["depots"]]
    return build_state_graph(tasks, depots)


def _dump(obj: dict, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, g in enumerate(ds.graphs):
        name = f"{i:03d}.json"
        _dump(instance_to_dict(g), out / name)
        files.append(name)
    _dump({"n": ds.n, "seed": ds.seed, "count": ds.count, "files": files}, out / "manifest.json")
    return out


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    graphs = [
        instance_from_dict(json.loads((root / name).read_text())) for name in manifest["files"]
    ]
    return Dataset(n=manifest["n"], seed=manifest["seed"], count=manifest["count"], graphs=graphs)


# -- single-shot harness -----------------------------------------------------


@dataclass
class ShotResult:
    """One planning attempt on one instance."""

    method: str
    index: int
    success: bool
    cost: float
    plan_time_s: float
    reverts: int = 0


def _execute_sequence(
    graph: TaskStateGraph,
    actions: list[JointAction],
    params: KinematicParams,
    failure: FailureModel | None,
    budget: int,
) -> tuple[bool, float, int]:
    """Run a planned sequence open-loop; failed draws retry the same action.

    Retries burn the shared budget; a structurally blocked step sinks the
    shot. Returns (success, re-simulated cost, retries used).
    """
    engine = EpisodeEngine(graph, CostOracle(params), failure)
    spent = 0
    for act in [*actions, None]:
        if act is None:
            if not engine.graph.all_done:
                return False, float("inf"), spent
            ret = return_index(engine.graph.n)
            act = JointAction(ret, ret)
        while True:
            if not engine.matrix().cell(act.a1, act.a2).feasible:
                return False, float("inf"), spent
            out = engine.step(act)
            if not out.failed:
                break
            spent += 1
            if spent > budget:
                return False, float("inf"), spent
    return True, cumulative_cost(engine.log), spent


def _finish_open_loop(
    method: str,
    index: int,
    graph: TaskStateGraph,
    plan,
    params: KinematicParams,
    failure: FailureModel | None,
    budget: int,
    plan_time: float,
) -> ShotResult:
    if not plan.success:
        return ShotResult(method, index, False, float("inf"), plan_time, plan.reverts)
    if failure is None:
        sim = simulate_plan(graph, plan.actions, params)
        return ShotResult(method, index, sim.success, sim.cost, plan_time, plan.reverts)
    ok, cost, spent = _execute_sequence(graph, plan.actions, params, failure, budget)
    return ShotResult(method, index, ok, cost, plan_time, plan.reverts + spent)


def single_shot(
    method: str,
    graph: TaskStateGraph,
    params: KinematicParams,
    source=None,
    fast_policy=None,
    step_back: bool = True,
    budget: int = 50,
    failure: FailureModel | None = None,
    index: int = 0,
) -> ShotResult:
    """One planning attempt; the clock covers exactly the planner call.

    Greedy and the policy are closed-loop: their matrices are rebuilt every
    step inside the planner, so matrix construction is on their clock.
    Exhaustive and matching emit a sequence first (that is their timed part)
    and execute it afterwards. Costs always come from re-simulation under the
    exact oracle, never from the ranking source. step_back off zeroes the
    recovery budget, making every shot strictly one attempt.
    """
    eff_budget = budget if step_back else 0
    src = source if source is not None else CostOracle(params)
    if method == "exhaustive":
        t0 = time.perf_counter()
        plan = exhaustive_search(graph, params)
        dt = time.perf_counter() - t0
        return _finish_open_loop(method, index, graph, plan, params, failure, eff_budget, dt)
    if method == "matching":
        t0 = time.perf_counter()
        plan = perfect_matching_plan(graph, src, params)
        dt = time.perf_counter() - t0
        return _finish_open_loop(method, index, graph, plan, params, failure, eff_budget, dt)
    if method == "greedy":
        chooser = greedy_chooser(src)
    elif method == "policy":
        if fast_policy is None:
            raise MissingCheckpoint("policy method needs a loaded checkpoint")
        chooser = policy_chooser(fast_policy, src)
    else:
        raise ValueError(f"unknown method {method!r}; known: {', '.join(PLANNER_NAMES)}")
    t0 = time.perf_counter()
    plan = step_back_replan(graph, chooser, params, failure=failure, budget=eff_budget)
    dt = time.perf_counter() - t0
    return ShotResult(method, index, plan.success, plan.cost, dt, plan.reverts)


def aggregate_shots(label: str, n: int, shots: list[ShotResult]) -> "MetricsRow":
    wins = [s for s in shots if s.success]
    return MetricsRow(
        method=label,
        n=n,
        success_rate=len(wins) / len(shots),
        mean_cost=float(np.mean([s.cost for s in wins])) if wins else float("inf"),
        mean_plan_time_s=float(np.mean([s.plan_time_s for s in shots])),
    )


def run_benchmark(
    methods: list[str],
    dataset: Dataset,
    params: KinematicParams | None = None,
    matrix_source: str = "oracle",
    predictor_path=None,
    policy_path=None,
    step_back: bool = True,
    budget: int = 50,
    p_fail: float = 0.0,
    failure_seed: int = 0,
    progress=None,
) -> list["MetricsRow"]:
    """Single-shot benchmark over a dataset; one aggregated row per method.

    The ranking source (exact oracle by default, a trained predictor when
    requested) feeds greedy, matching, and the policy; exhaustive always
    searches true costs. Failure draws are seeded per instance so paired
    step-back on/off runs see the same streams.
    """
    params = params if params is not None else KinematicParams()
    unknown = [m for m in methods if m not in PLANNER_NAMES]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; known: {', '.join(PLANNER_NAMES)}")
    source: object = CostOracle(params)
    if matrix_source == "predictor":
        from .predictor import PredictorSource, load_predictor

        if predictor_path is None or not Path(predictor_path).exists():
            raise MissingCheckpoint(f"predictor checkpoint missing: {predictor_path}")
        model, _ = load_predictor(predictor_path)
        source = PredictorSource(model)
    elif matrix_source != "oracle":
        raise ValueError(f"unknown matrix source {matrix_source!r}")
    fast = None
    if "policy" in methods:
        # train owns checkpoint io and imports this module, hence the local import
        from .policy import FastPolicy
        from .train import load_policy

        if policy_path is None or not Path(policy_path).exists():
            raise MissingCheckpoint(f"policy checkpoint missing: {policy_path}")
        pol, _ = load_policy(policy_path)
        fast = FastPolicy(pol)
    rows = []
    for method in methods:
        shots = []
        for i, g in enumerate(dataset.graphs):
            failure = (
                FailureModel(p_fail, seed=failure_seed * 1_000_003 + i) if p_fail > 0 else None
            )
            shot = single_shot(
                method,
                g,
                params,
                source=source,
                fast_policy=fast,
                step_back=step_back,
                budget=budget,
                failure=failure,
                index=i,
            )
            shots.append(shot)
            if progress is not None:
                progress(shot)
        rows.append(aggregate_shots(method, dataset.n, shots))
    return rows


# -- ablation drivers --------------------------------------------------------


ABLATION_AXES = {
    "coop_encoder": ("row_col", "mlp", "full"),
    "action_generator": ("mhca", "mhsa", "mlp"),
    "penalty": ("adaptive", "fixed", "none"),
    "oracle": ("kinematic", "euclidean", "euclidean_overlap"),
    "predictor_size": ("default", "small"),
}


@dataclass
class AblationConfig:
    """Desk-scale budgets for ablation training runs."""

    iterations: int = 30
    episodes_per_iter: int = 32
    seed: int = 0
    predictor_samples: int = 20000
    predictor_epochs: int = 10
    budget: int = 50


def run_ablation(
    axis: str, dataset: Dataset, config: AblationConfig | None = None, progress=None
) -> list["MetricsRow"]:
    """Train and score the variants along one ablation axis.

    Policy axes retrain a small policy per variant and decode the dataset
    greedily (no step-back, isolating allocation quality); the oracle axis
    always evaluates under the kinematic oracle no matter which oracle
    trained the variant. The predictor-size axis trains two predictor
    variants and plans greedily on their estimated matrices.
    """
    cfg = config or AblationConfig()
    if axis not in ABLATION_AXES:
        raise UnsupportedAxis(f"axis {axis!r}; supported: {', '.join(sorted(ABLATION_AXES))}")
    eval_params = KinematicParams()
    eval_oracle = CostOracle(eval_params)
    rows: list[MetricsRow] = []
    if axis == "predictor_size":
        from .predictor import (
            PredictorConfig,
            PredictorSource,
            TrainPredictorConfig,
            sample_predictor_dataset,
            train_predictor,
        )

        sizes = {"default": PredictorConfig(), "small": PredictorConfig(hidden=64, layers=2)}
        data = sample_predictor_dataset(cfg.predictor_samples, eval_oracle, seed=cfg.seed)
        for variant in ABLATION_AXES[axis]:
            model = train_predictor(
                data,
                TrainPredictorConfig(epochs=cfg.predictor_epochs, seed=cfg.seed),
                model_config=sizes[variant],
            )
            src = PredictorSource(model)
            shots = [
                single_shot("greedy", g, eval_params, source=src, budget=cfg.budget, index=i)
                for i, g in enumerate(dataset.graphs)
            ]
            rows.append(aggregate_shots(f"{axis}={variant}", dataset.n, shots))
            if progress is not None:
                progress(rows[-1])
        return rows
    from dataclasses import replace

    from .policy import PolicyConfig
    from .train import TrainConfig, evaluate_policy, train_policy

    for variant in ABLATION_AXES[axis]:
        tc = TrainConfig(
            n=dataset.n,
            iterations=cfg.iterations,
            episodes_per_iter=cfg.episodes_per_iter,
            seed=cfg.seed,
        )
        pc = PolicyConfig()
        if axis == "coop_encoder":
            pc = replace(pc, coop_encoder=variant)
        elif axis == "action_generator":
            pc = replace(pc, generator=variant)
        elif axis == "penalty":
            tc = replace(tc, penalty=variant, penalty_coef=1.0)
        elif axis == "oracle":
            tc = replace(tc, oracle_variant=variant)
        trained, _ = train_policy(tc, policy_config=pc)
        eval_tc = replace(tc, oracle_variant="kinematic")
        t0 = time.perf_counter()
        mean_cost, rate = evaluate_policy(trained, dataset.graphs, eval_oracle, eval_tc)
        per_instance = (time.perf_counter() - t0) / len(dataset.graphs)
        rows.append(MetricsRow(f"{axis}={variant}", dataset.n, rate, mean_cost, per_instance))
        if progress is not None:
            progress(rows[-1])
    return rows


# -- metrics and reports -----------------------------------------------------


@dataclass
class MetricsRow:
    method: str
    n: int
    success_rate: float
    mean_cost: float
    mean_plan_time_s: float


def _sig6(x: float) -> float:
    if not np.isfinite(x):
        return float(x)
    return float(f"{x:.6g}")


def emit_report(rows: list[MetricsRow], fmt: str, path: str | Path) -> Path:
    """Write rows as CSV or JSON with 6-significant-digit floats."""
    if not rows:
        raise ValueError("no rows to report")
    out = Path(path)
    if fmt == "csv":
        lines = ["method,n,success_rate,mean_cost,mean_plan_time_s"]
        for r in rows:
            lines.append(
                f"{r.method},{r.n},{_sig6(r.success_rate):.6g},"
                f"{_sig6(r.mean_cost):.6g},{_sig6(r.mean_plan_time_s):.6g}"
            )
        text = "\n".join(lines) + "\n"
    elif fmt == "json":
        payload = [
            {
                "method": r.method,
                "n": r.n,
                "success_rate": _sig6(r.success_rate),
                "mean_cost": _sig6(r.mean_cost),
                "mean_plan_time_s": _sig6(r.mean_plan_time_s),
            }
            for r in rows
        ]
        text = json.dumps(payload, indent=2) + "\n"
    else:
        raise ValueError(f"unknown report format: {fmt}")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    except OSError as e:
        raise IoFailure(f"cannot write report {out}: {e}") from e
    return out


def load_report(path: str | Path) -> list[MetricsRow]:
    p = Path(path)
    if p.suffix == ".json":
        return [MetricsRow(**row) for row in json.loads(p.read_text())]
    rows = []
    lines = p.read_text().strip().splitlines()
    for line in lines[1:]:
        method, n, sr, mc, mt = line.split(",")
        rows.append(MetricsRow(method, int(n), float(sr), float(mc), float(mt)))
    return rows


def emit_plots(rows: list[MetricsRow], out_dir: str | Path) -> list[Path]:
    """Render cost-vs-n and planning-time-vs-n charts as SVG files.

    Purely presentational; one series per method, log time axis. matplotlib
    loads lazily so the harness works without a plotting stack.
    """
    if not rows:
        raise ValueError("no rows to plot")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    series: dict[str, list] = {}
    for r in rows:
        series.setdefault(r.method, []).append((r.n, r.mean_cost, r.mean_plan_time_s))
    paths = []
    panels = (
        ("cost_vs_n.svg", "mean cumulative cost [s]", 1, False),
        ("time_vs_n.svg", "mean planning time [s]", 2, True),
    )
    for fname, ylabel, col, logy in panels:
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for method, pts in sorted(series.items()):
            pts = sorted(pts)
            ax.plot([p[0] for p in pts], [p[col] for p in pts], marker="o", label=method)
        ax.set_xlabel("number of tasks n")
        ax.set_ylabel(ylabel)
        if logy:
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        target = out / fname
        try:
            out.mkdir(parents=True, exist_ok=True)
            fig.savefig(target, format="svg")
        except OSError as e:
            raise IoFailure(f"cannot write plot {target}: {e}") from e
        finally:
            plt.close(fig)
        paths.append(target)
    return paths
