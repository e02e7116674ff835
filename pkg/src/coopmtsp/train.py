"""Clipped-surrogate policy-gradient training for the allocation policy.

Rollouts run whole lockstep batches of episodes with sampled joint actions;
rewards are the halved pair costs (so a successful episode's return is minus
half its total cost) with a sparse terminal penalty on failure. Updates use
the standard clipped PPO objective with GAE; minibatches group transitions by
grid size so same-shape observations batch cleanly.
"""

from __future__ import annotations

import configparser
import csv
import time
import typing
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .bench import generate_dataset
from .core import EpisodeStatus, JointAction, return_index
from .costmodel import CostOracle, EpisodeEngine, KinematicParams, OracleVariant, return_cost
from .nn import Adam, backward, load_checkpoint, save_checkpoint
from .policy import (
    PolicyConfig,
    PolicyObservation,
    PolicyParams,
    SelectMode,
    build_observation,
    collate,
    policy_forward,
    select_action,
)

__all__ = [
    "PenaltyMode",
    "Transition",
    "RolloutResult",
    "TrainConfig",
    "Diverged",
    "step_reward",
    "rollout",
    "episode_return",
    "gae_advantages",
    "ppo_update",
    "evaluate_policy",
    "train_policy",
    "train_config_from_config",
    "save_policy",
    "load_policy",
]

REPORT_COLUMNS = (
    "iteration",
    "mean_cost",
    "success_rate",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
)


class Diverged(RuntimeError):
    """Training loss became non-finite."""


class PenaltyMode(str, Enum):
    ADAPTIVE = "adaptive"   # penalty = unfinished fraction at failure
    FIXED = "fixed"         # penalty = a constant on failure
    NONE = "none"


def step_reward(
    c_mv: float,
    c_tf: float,
    terminal_failure: bool,
    n_u: int,
    n: int,
    mode: PenaltyMode,
    coef: float = 1.0,
) -> float:
    """Dense halved-cost reward, minus a sparse penalty on terminal failure."""
    if c_mv < 0 or c_tf < 0:
        raise ValueError("phase costs must be non-negative")
    if not (0 <= n_u <= n):
        raise ValueError(f"unfinished count {n_u} out of range 0..{n}")
    r = -(c_mv + c_tf) / 2.0
    if terminal_failure:
        if mode is PenaltyMode.ADAPTIVE:
            r -= n_u / n
        elif mode is PenaltyMode.FIXED:
            r -= coef
    return r


@dataclass
class Transition:
    obs: PolicyObservation
    action: tuple[int, int]       # reduced-grid (row, col) as sampled
    env_action: JointAction
    logp: float
    value: float
    reward: float
    done: bool


@dataclass(frozen=True)
class RolloutResult:
    success: bool
    cost: float                   # executed episode cost; inf on failure


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults are the shipping n=6 recipe.

    The default penalty is FIXED with a coefficient that dominates half the
    episode cost at the training sizes. The literal adaptive n_u/n penalty
    caps at 1 while aborting early saves ~C/2 of dense cost, so under this
    oracle's deadlock-rich geometry it teaches the policy to seek deadlocks
    (measured: success rate decays 0.53 -> 0.2 within 20 iterations).
    ADAPTIVE stays available for the ablation.
    """

    n: int = 6
    iterations: int = 300
    episodes_per_iter: int = 64
    epochs_per_batch: int = 4
    minibatch: int = 256
    lr: float = 1e-3
    clip_ratio: float = 0.2
    discount: float = 1.0
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    penalty: str = "fixed"
    penalty_coef: float = 20.0
    include_return_cost: bool = True
    matrix_source: str = "oracle"   # oracle | predictor
    oracle_variant: str = "kinematic"
    predictor_path: str = ""
    seed: int = 0
    val_count: int = 50
    val_every: int = 10

    def __post_init__(self) -> None:
        if not (0.0 < self.clip_ratio < 1.0):
            raise ValueError(f"clip_ratio must be in (0, 1), got {self.clip_ratio}")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError(f"discount must be in (0, 1], got {self.discount}")
        PenaltyMode(self.penalty)
        if self.matrix_source not in ("oracle", "predictor"):
            raise ValueError(f"unknown matrix_source {self.matrix_source!r}")
        if self.n < 2 or self.n % 2:
            raise ValueError("n must be even and >= 2")

    @property
    def penalty_mode(self) -> PenaltyMode:
        return PenaltyMode(self.penalty)


def train_config_from_config(path_or_sections) -> TrainConfig:
    """Build a TrainConfig from an INI file's [train] section.

    Unknown keys are rejected; missing keys keep their defaults.
    """
    if isinstance(path_or_sections, dict):
        section = dict(path_or_sections.get("train", {}))
    else:
        cp = configparser.ConfigParser()
        read = cp.read(str(path_or_sections))
        if not read:
            raise FileNotFoundError(f"config file not found: {path_or_sections}")
        section = dict(cp["train"]) if cp.has_section("train") else {}
    kwargs: dict = {}
    fields = typing.get_type_hints(TrainConfig)
    for key, raw in section.items():
        if key not in fields:
            raise ValueError(f"unknown [train] key: {key}")
        kind = fields[key]
        if kind is int:
            kwargs[key] = int(raw)
        elif kind is float:
            kwargs[key] = float(raw)
        elif kind is bool:
            kwargs[key] = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            kwargs[key] = raw.strip()
    return TrainConfig(**kwargs)


def _oracle_for(config: TrainConfig) -> CostOracle:
    return CostOracle(KinematicParams(variant=OracleVariant(config.oracle_variant)))


def _matrix_source(config: TrainConfig, oracle: CostOracle):
    if config.matrix_source == "oracle":
        return oracle
    from .predictor import PredictorSource, load_predictor

    if not config.predictor_path:
        raise ValueError("matrix_source=predictor needs predictor_path")
    model, _ = load_predictor(config.predictor_path)
    return PredictorSource(model)


def _iter_seed(seed: int, tag: int, k: int) -> int:
    # distinct deterministic integer streams per purpose without rng plumbing
    return (seed * 1_000_003 + tag) * 1_000_003 + k


def _task_cost(env: EpisodeEngine) -> float:
    return float(sum(r.move_time + r.transfer_time for r in env.log.records))


def _return_price(env: EpisodeEngine, exec_params: KinematicParams) -> float:
    """Cost of the forced joint return in an all-done episode, inf if blocked.

    The return is a selection-only cell under estimated matrices, so when the
    source leaves it unpriced the true oracle supplies the number. The engine
    never steps the return here; callers fold the price into reward and cost.
    """
    g = env.graph
    ret = return_index(g.n)
    cell = env.matrix().cell(ret, ret)
    if not cell.feasible:
        return float("inf")
    if np.isfinite(cell.move_time):
        return float(cell.move_time)
    return float(return_cost(g, exec_params))


# -- rollout -----------------------------------------------------------------


def rollout(
    params: PolicyParams,
    graphs: list,
    source,
    config: TrainConfig,
    seed: int,
) -> tuple[list[list[Transition]], list[RolloutResult]]:
    """Sampled lockstep episodes over ``graphs``.

    Episodes end at success or deadlock. The forced joint-return step after
    the last task is folded into the final transition's reward (halved return
    time) rather than logged as a decision; mixed task/return cells are
    infeasible under the default oracle, so the policy only ever decides
    between task pairs. Returns one transition list and one outcome per
    episode.
    """
    rng = np.random.default_rng([seed])
    mode = config.penalty_mode
    n = config.n
    exec_params = _oracle_for(config).params
    envs = [EpisodeEngine(g, source) for g in graphs]
    trajs: list[list[Transition]] = [[] for _ in envs]
    results: list[RolloutResult | None] = [None] * len(envs)
    active = list(range(len(envs)))
    for _ in range(n // 2 + 2):
        if not active:
            break
        obs = [build_observation(envs[i].graph, envs[i].matrix()) for i in active]
        batch = collate(obs)
        dist, value = policy_forward(params, batch)
        joint = dist.joint.data
        values = value.data
        still = []
        for b, i in enumerate(active):
            row, col = select_action(joint[b], SelectMode.SAMPLE, rng)
            logp = float(np.log(joint[b, row, col]))
            env_action = obs[b].to_env_action(row, col)
            out = envs[i].step(env_action)
            reward = step_reward(
                out.cell.move_time, out.cell.transfer_time, False, 0, n, mode
            )
            done = True
            g = envs[i].graph
            if g.all_done:
                rc = _return_price(envs[i], exec_params)
                if np.isfinite(rc):
                    if config.include_return_cost:
                        reward -= rc / 2.0
                    results[i] = RolloutResult(True, _task_cost(envs[i]) + rc)
                else:
                    # return corridors can collide; all tasks done but the
                    # episode still fails (adaptive penalty is 0 here since
                    # nothing is unfinished, fixed mode still charges)
                    reward += step_reward(0.0, 0.0, True, 0, n, mode, config.penalty_coef)
                    results[i] = RolloutResult(False, float("inf"))
            elif out.status is EpisodeStatus.DEADLOCK:
                n_u = int(np.count_nonzero(~np.asarray(g.done)))
                reward += step_reward(0.0, 0.0, True, n_u, n, mode, config.penalty_coef)
                results[i] = RolloutResult(False, float("inf"))
            else:
                done = False
                still.append(i)
            trajs[i].append(
                Transition(
                    obs=obs[b],
                    action=(row, col),
                    env_action=env_action,
                    logp=logp,
                    value=float(values[b]),
                    reward=float(reward),
                    done=done,
                )
            )
        active = still
    for i, r in enumerate(results):
        if r is None:  # safety-bound overrun; treat as failure
            results[i] = RolloutResult(False, float("inf"))
    return trajs, results


def episode_return(traj: list[Transition]) -> float:
    return float(sum(t.reward for t in traj))


def gae_advantages(
    traj: list[Transition], gamma: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode advantage and return targets (terminal value = 0)."""
    T = len(traj)
    adv = np.zeros(T)
    gae = 0.0
    next_value = 0.0
    for t in reversed(range(T)):
        delta = traj[t].reward + gamma * next_value - traj[t].value
        gae = delta + gamma * lam * gae
        adv[t] = gae
        next_value = traj[t].value
    returns = adv + np.array([t.value for t in traj])
    return adv, returns


# -- update ------------------------------------------------------------------


def ppo_update(
    params: PolicyParams,
    optimizer: Adam,
    trajs: list[list[Transition]],
    config: TrainConfig,
    seed: int = 0,
) -> dict:
    """One clipped-surrogate update over the batch; returns mean statistics."""
    flat: list[Transition] = [t for traj in trajs for t in traj]
    if not flat:
        raise ValueError("no transitions to update on")
    adv_list = []
    ret_list = []
    for traj in trajs:
        if not traj:
            continue
        a, r = gae_advantages(traj, config.discount, config.gae_lambda)
        adv_list.append(a)
        ret_list.append(r)
    adv = np.concatenate(adv_list)
    rets = np.concatenate(ret_list)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    groups: dict[int, list[int]] = {}
    for k, t in enumerate(flat):
        groups.setdefault(t.obs.m, []).append(k)
    rng = np.random.default_rng([seed, 4])
    eps = config.clip_ratio
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}
    seen = 0
    for _ in range(config.epochs_per_batch):
        for m in sorted(groups, reverse=True):
            idx = np.array(groups[m])
            rng.shuffle(idx)
            for lo in range(0, len(idx), config.minibatch):
                chunk = idx[lo : lo + config.minibatch]
                batch = collate([flat[k].obs for k in chunk])
                rows = np.array([flat[k].action[0] for k in chunk], dtype=np.intp)
                cols = np.array([flat[k].action[1] for k in chunk], dtype=np.intp)
                old_logp = np.array([flat[k].logp for k in chunk])
                a = adv[chunk]
                dist, value = policy_forward(params, batch)
                logp = dist.log_prob(rows, cols)
                ratio = (logp - old_logp).exp()
                r = ratio.data
                # clipped surrogate via a stop-gradient weight: the gradient
                # vanishes exactly where the clipped branch is active, while
                # the reported loss is the true min() objective
                blocked = ((a > 0) & (r > 1 + eps)) | ((a < 0) & (r < 1 - eps))
                grad_w = np.where(blocked, 0.0, a)
                policy_term = -(ratio * grad_w).sum() / len(chunk)
                true_obj = np.minimum(r * a, np.clip(r, 1 - eps, 1 + eps) * a)
                verr = value - rets[chunk]
                value_term = (verr * verr).sum() * (config.value_coef / len(chunk))
                ent = dist.entropy()
                ent_term = ent.sum() * (-config.entropy_coef / len(chunk))
                total = policy_term + value_term + ent_term
                if not np.isfinite(total.data):
                    raise Diverged("non-finite loss in policy update")
                params.store.zero_grad()
                backward(total)
                optimizer.step()
                w = len(chunk)
                stats["policy_loss"] += float(-true_obj.mean()) * w
                stats["value_loss"] += float((verr.data**2).mean()) * w
                stats["entropy"] += float(ent.data.mean()) * w
                stats["clip_fraction"] += float((np.abs(r - 1) > eps).mean()) * w
                seen += w
    return {k: v / seen for k, v in stats.items()}


# -- evaluation and the outer loop -------------------------------------------


def evaluate_policy(
    params: PolicyParams, graphs: list, source, config: TrainConfig
) -> tuple[float, float]:
    """Greedy-decoded lockstep episodes; (mean success cost, success rate).

    Mean cost is over successful episodes only, infinity when none succeed.
    """
    exec_params = _oracle_for(config).params
    envs = [EpisodeEngine(g, source) for g in graphs]
    active = list(range(len(envs)))
    costs = []
    for _ in range(config.n // 2 + 2):
        if not active:
            break
        obs = [build_observation(envs[i].graph, envs[i].matrix()) for i in active]
        dist, _ = policy_forward(params, collate(obs), need_value=False)
        joint = dist.joint.data
        still = []
        for b, i in enumerate(active):
            row, col = select_action(joint[b], SelectMode.ARGMAX)
            out = envs[i].step(obs[b].to_env_action(row, col))
            g = envs[i].graph
            if g.all_done:
                rc = _return_price(envs[i], exec_params)
                if np.isfinite(rc):
                    costs.append(_task_cost(envs[i]) + rc)
            elif out.status is not EpisodeStatus.DEADLOCK:
                still.append(i)
        active = still
    mean_cost = float(np.mean(costs)) if costs else float("inf")
    return mean_cost, len(costs) / len(envs)


def save_policy(path, params: PolicyParams, extra: dict | None = None) -> Path:
    payload = dict(extra or {})
    payload["policy_config"] = params.config.to_dict()
    return save_checkpoint(path, params.store, extra=payload)


def load_policy(path) -> tuple[PolicyParams, dict]:
    store, extra = load_checkpoint(path)
    config = PolicyConfig.from_dict(extra["policy_config"])
    return PolicyParams(config, store=store), extra


def train_policy(
    config: TrainConfig,
    policy_config: PolicyConfig | None = None,
    checkpoint_path=None,
    report_path=None,
    resume=None,
    progress=None,
) -> tuple[PolicyParams, list[dict]]:
    """Full training loop: rollout, update, validate, checkpoint, CSV report.

    Fresh instances come from an iteration-keyed seed stream each iteration;
    validation greedy-decodes a fixed held-out set every ``val_every``
    iterations and at the end. The returned parameters are the best-validation
    ones when any validation pass went clean, otherwise the final ones.
    Resuming continues the instance stream from the recorded iteration but
    restarts optimizer moments.
    """
    t0 = time.time()
    oracle = _oracle_for(config)
    source = _matrix_source(config, oracle)
    start_iter = 0
    if resume is not None:
        params, extra = load_policy(resume)
        start_iter = int(extra.get("next_iteration", 0))
    else:
        params = PolicyParams(policy_config or PolicyConfig(), seed=config.seed)
    optimizer = Adam(params.store, lr=config.lr)
    val_graphs = generate_dataset(
        config.n, config.val_count, seed=_iter_seed(config.seed, 91, 0)
    ).graphs
    best_val = float("inf")
    best_blob = None
    rows: list[dict] = []
    writer = None
    fh = None
    if report_path is not None:
        fresh = start_iter == 0 or not Path(report_path).exists()
        fh = open(report_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(REPORT_COLUMNS)
    try:
        for it in range(start_iter, config.iterations):
            graphs = generate_dataset(
                config.n, config.episodes_per_iter, seed=_iter_seed(config.seed, 11, it)
            ).graphs
            trajs, results = rollout(
                params, graphs, source, config, seed=_iter_seed(config.seed, 23, it)
            )
            stats = ppo_update(
                params, optimizer, trajs, config, seed=_iter_seed(config.seed, 37, it)
            )
            costs = [r.cost for r in results if r.success]
            row = {
                "iteration": it,
                "mean_cost": float(np.mean(costs)) if costs else float("inf"),
                "success_rate": sum(r.success for r in results) / len(results),
                **stats,
            }
            last = it == config.iterations - 1
            if config.val_every and (it % config.val_every == config.val_every - 1 or last):
                val_cost, val_rate = evaluate_policy(params, val_graphs, source, config)
                row["val_cost"] = val_cost
                row["val_rate"] = val_rate
                score = val_cost if val_rate == 1.0 else float("inf")
                if score <= best_val:
                    best_val = score
                    best_blob = {name: t.data.copy() for name, t in params.store.items()}
                if checkpoint_path is not None:
                    save_policy(
                        checkpoint_path,
                        params,
                        extra={
                            "next_iteration": it + 1,
                            "train_config": asdict(config),
                            "best_val_cost": best_val,
                            "elapsed_seconds": round(time.time() - t0, 1),
                        },
                    )
            rows.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in REPORT_COLUMNS])
                fh.flush()
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    if best_blob is not None and np.isfinite(best_val):
        for name, t in params.store.items():
            t.data[...] = best_blob[name]
    if checkpoint_path is not None:
        save_policy(
            checkpoint_path,
            params,
            extra={
                "next_iteration": config.iterations,
                "train_config": asdict(config),
                "best_val_cost": best_val,
                "elapsed_seconds": round(time.time() - t0, 1),
            },
        )
    return params, rows
