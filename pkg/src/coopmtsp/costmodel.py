"""Cooperative cost oracle for joint two-arm actions.

Each joint action has two phases per arm: an empty-handed move to the grasp
pose, then a carrying transfer to the place pose. The per-phase joint cost is
the slower arm's transit time inflated by how close the two arms' paths run:

    cost = max(t1, t2) * (1 + overlap_gain * corridor_overlap)

Feasibility is purely geometric (endpoint separation and corridor clearance)
and identical across oracle variants; the variants only change how transit
time is computed and whether the overlap inflation applies.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from numpy.typing import NDArray

from .core import (
    Arm,
    EpisodeLog,
    EpisodeStatus,
    JointAction,
    Pose,
    StepRecord,
    TaskStateGraph,
    apply_joint_action,
    episode_status,
    return_index,
)

__all__ = [
    "OracleVariant",
    "KinematicParams",
    "CellCost",
    "CooperativeCostMatrix",
    "CostOracle",
    "FailureModel",
    "EpisodeEngine",
    "StepOutcome",
    "transit_time",
    "segment_distance",
    "corridor_overlap",
    "pair_cost",
    "phase_feasibility",
    "build_cost_matrix",
    "global_mask",
    "return_cost",
    "simulate_actions",
    "params_from_config",
]


class OracleVariant(str, Enum):
    KINEMATIC = "kinematic"
    EUCLIDEAN = "euclidean"
    EUCLIDEAN_OVERLAP = "euclidean_overlap"


@dataclass(frozen=True)
class KinematicParams:
    linear_speed: float = 0.5      # m/s
    angular_speed: float = np.pi   # rad/s
    overlap_gain: float = 0.5      # cost inflation at fully shared corridors
    overlap_range: float = 0.3     # m, separation at which inflation fades out
    safe_separation: float = 0.1   # m, min distance between grasp/place points
    collision_clearance: float = 0.05  # m, min distance between path corridors
    variant: OracleVariant = OracleVariant.KINEMATIC
    allow_idle: bool = False       # let one arm wait in place on a return action
    p_fail: float = 0.0            # per-step execution failure probability

    def __post_init__(self) -> None:
        if not (self.collision_clearance < self.safe_separation < self.overlap_range):
            raise ValueError(
                "need collision_clearance < safe_separation < overlap_range, got "
                f"{self.collision_clearance}, {self.safe_separation}, {self.overlap_range}"
            )
        if not (0.0 <= self.p_fail < 1.0):
            raise ValueError(f"p_fail must be in [0, 1), got {self.p_fail}")

    @property
    def effective_overlap_gain(self) -> float:
        return 0.0 if self.variant is OracleVariant.EUCLIDEAN else self.overlap_gain

    @property
    def use_orientation(self) -> bool:
        return self.variant is OracleVariant.KINEMATIC


@dataclass(frozen=True)
class CellCost:
    move_time: float
    transfer_time: float
    feasible: bool

    @property
    def total(self) -> float:
        return self.move_time + self.transfer_time


@dataclass
class CooperativeCostMatrix:
    """Dense (n+1)x(n+1) joint-action costs; row = arm1 choice, col = arm2.

    Index n is the return action. Infeasible cells hold infinite times and a
    cleared feasible bit.
    """

    move: NDArray[np.float64]
    transfer: NDArray[np.float64]
    feasible: NDArray[np.bool_]

    @property
    def n(self) -> int:
        return self.move.shape[0] - 1

    def cell(self, i: int, j: int) -> CellCost:
        return CellCost(
            float(self.move[i, j]),
            float(self.transfer[i, j]),
            bool(self.feasible[i, j]),
        )

    def features(self) -> NDArray[np.float64]:
        """Stack [move, transfer, feasible] into an (n+1, n+1, 3) array.

        Infeasible times are zeroed so downstream consumers never see inf.
        """
        ok = self.feasible
        mv = np.where(ok, self.move, 0.0)
        tf = np.where(ok, self.transfer, 0.0)
        return np.stack([mv, tf, ok.astype(np.float64)], axis=-1)


def _wrap(a: NDArray[np.float64]) -> NDArray[np.float64]:
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def transit_time(start: Pose, goal: Pose, params: KinematicParams) -> float:
    """Single-arm point-to-point time: travel plus slowest-axis reorientation."""
    lin = float(np.linalg.norm(goal.pos - start.pos)) / params.linear_speed
    if not params.use_orientation:
        return lin
    ang = float(np.max(np.abs(_wrap(goal.rpy - start.rpy)))) / params.angular_speed
    return lin + ang


def segment_distance(p0, p1, q0, q1) -> NDArray[np.float64]:
    """Minimum distance between 3D segments; broadcasts over leading axes.

    Degenerate (zero-length) segments are treated as points.
    """
    p0, p1, q0, q1 = (np.asarray(x, dtype=np.float64) for x in (p0, p1, q0, q1))
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    eps = 1e-12
    a_safe = np.where(a > eps, a, 1.0)
    e_safe = np.where(e > eps, e, 1.0)
    denom = a * e - b * b
    denom_safe = np.where(denom > eps, denom, 1.0)
    s = np.where(denom > eps, np.clip((b * f - c * e) / denom_safe, 0.0, 1.0), 0.0)
    t = (b * s + f) / e_safe
    t_cl = np.clip(t, 0.0, 1.0)
    # if t left [0, 1], re-derive s against the clamped endpoint
    s = np.where(t != t_cl, np.clip((b * t_cl - c) / a_safe, 0.0, 1.0), s)
    s = np.where(a > eps, s, 0.0)
    t = np.clip((b * s + f) / e_safe, 0.0, 1.0)
    t = np.where(e > eps, t, 0.0)
    cp = p0 + s[..., None] * d1
    cq = q0 + t[..., None] * d2
    return np.linalg.norm(cp - cq, axis=-1)


def corridor_overlap(seg1, seg2, params: KinematicParams) -> float:
    """How much two straight-line corridors interfere, in [0, 1].

    ``seg1``/``seg2`` are (start, end) position pairs. Zero once the closest
    approach reaches overlap_range, one when the paths touch.
    """
    d = float(segment_distance(seg1[0], seg1[1], seg2[0], seg2[1]))
    return max(0.0, 1.0 - d / params.overlap_range)


def _phase_cost(t1: float, t2: float, overlap: float, params: KinematicParams) -> float:
    return max(t1, t2) * (1.0 + params.effective_overlap_gain * overlap)


def _leg_endpoints(graph: TaskStateGraph, arm: Arm, task: int | None):
    """Move and transfer legs for one arm's action, as (start, end) pose pairs.

    ``task`` None means idle: both legs collapse to the current pose.
    """
    ee = graph.ee_pose(arm)
    if task is None:
        return (ee, ee), (ee, ee)
    t = graph.tasks[task]
    return (ee, t.pick), (t.pick, t.place)


def phase_feasibility(
    graph: TaskStateGraph,
    task1: int | None,
    task2: int | None,
    params: KinematicParams,
) -> tuple[bool, bool]:
    """(transit ok, transfer ok) geometry checks for a two-arm task pair.

    Transit requires the grasp points (or the idle arm's held position) at
    least safe_separation apart and the approach corridors at least
    collision_clearance apart; transfer applies the same to the place points
    and carry corridors.
    """
    (mv1, tf1) = _leg_endpoints(graph, Arm.ARM1, task1)
    (mv2, tf2) = _leg_endpoints(graph, Arm.ARM2, task2)
    pick_sep = float(np.linalg.norm(mv1[1].pos - mv2[1].pos))
    place_sep = float(np.linalg.norm(tf1[1].pos - tf2[1].pos))
    mv_clear = float(segment_distance(mv1[0].pos, mv1[1].pos, mv2[0].pos, mv2[1].pos))
    tf_clear = float(segment_distance(tf1[0].pos, tf1[1].pos, tf2[0].pos, tf2[1].pos))
    transit_ok = pick_sep >= params.safe_separation and mv_clear >= params.collision_clearance
    transfer_ok = place_sep >= params.safe_separation and tf_clear >= params.collision_clearance
    return transit_ok, transfer_ok


def pair_cost(
    graph: TaskStateGraph,
    task1: int | None,
    task2: int | None,
    params: KinematicParams,
) -> CellCost:
    """Joint cost of arm1 serving ``task1`` while arm2 serves ``task2``.

    None marks an idle arm (zero-length legs). This is the scalar reference
    implementation; build_cost_matrix computes the same numbers vectorized.
    """
    (mv1, tf1) = _leg_endpoints(graph, Arm.ARM1, task1)
    (mv2, tf2) = _leg_endpoints(graph, Arm.ARM2, task2)
    transit_ok, transfer_ok = phase_feasibility(graph, task1, task2, params)
    if not (transit_ok and transfer_ok):
        return CellCost(np.inf, np.inf, False)
    mv_ov = corridor_overlap((mv1[0].pos, mv1[1].pos), (mv2[0].pos, mv2[1].pos), params)
    tf_ov = corridor_overlap((tf1[0].pos, tf1[1].pos), (tf2[0].pos, tf2[1].pos), params)
    move = _phase_cost(
        transit_time(mv1[0], mv1[1], params),
        transit_time(mv2[0], mv2[1], params),
        mv_ov,
        params,
    )
    transfer = _phase_cost(
        transit_time(tf1[0], tf1[1], params),
        transit_time(tf2[0], tf2[1], params),
        tf_ov,
        params,
    )
    return CellCost(move, transfer, True)


def return_cost(graph: TaskStateGraph, params: KinematicParams) -> float:
    """Cost of the final joint move home; inf if the home paths collide."""
    legs = []
    for k in (Arm.ARM1, Arm.ARM2):
        legs.append((graph.ee_pose(k), graph.depots[k].initial))
    sep = float(np.linalg.norm(legs[0][1].pos - legs[1][1].pos))
    clear = float(
        segment_distance(legs[0][0].pos, legs[0][1].pos, legs[1][0].pos, legs[1][1].pos)
    )
    if sep < params.safe_separation or clear < params.collision_clearance:
        return float(np.inf)
    ov = corridor_overlap(
        (legs[0][0].pos, legs[0][1].pos), (legs[1][0].pos, legs[1][1].pos), params
    )
    return _phase_cost(
        transit_time(legs[0][0], legs[0][1], params),
        transit_time(legs[1][0], legs[1][1], params),
        ov,
        params,
    )


def _pose_block(poses: list[Pose]) -> tuple[NDArray, NDArray]:
    pos = np.stack([p.pos for p in poses]) if poses else np.zeros((0, 3))
    rpy = np.stack([p.rpy for p in poses]) if poses else np.zeros((0, 3))
    return pos, rpy


def _transit_times_vec(
    start_pos, start_rpy, goal_pos, goal_rpy, params: KinematicParams
):
    lin = np.linalg.norm(goal_pos - start_pos, axis=-1) / params.linear_speed
    if not params.use_orientation:
        return lin
    ang = np.max(np.abs(_wrap(goal_rpy - start_rpy)), axis=-1) / params.angular_speed
    return lin + ang


def build_cost_matrix(graph: TaskStateGraph, params: KinematicParams) -> CooperativeCostMatrix:
    """Dense joint-action costs for the current state.

    Structural rules baked into the feasible bits: the diagonal (shared task),
    rows/columns of finished tasks, and the return row/column. A task/return
    mix is infeasible unless allow_idle is set; return/return requires every
    task done.
    """
    n = graph.n
    ret = return_index(n)
    size = n + 1
    move = np.full((size, size), np.inf)
    transfer = np.full((size, size), np.inf)
    ok = np.zeros((size, size), dtype=bool)

    ee1 = graph.ee_pose(Arm.ARM1)
    ee2 = graph.ee_pose(Arm.ARM2)
    pick_pos, pick_rpy = _pose_block([t.pick for t in graph.tasks])
    place_pos, place_rpy = _pose_block([t.place for t in graph.tasks])

    if n > 0:
        # Per-arm single-leg times for every candidate task.
        t_mv1 = _transit_times_vec(ee1.pos, ee1.rpy, pick_pos, pick_rpy, params)
        t_mv2 = _transit_times_vec(ee2.pos, ee2.rpy, pick_pos, pick_rpy, params)
        t_tf = _transit_times_vec(pick_pos, pick_rpy, place_pos, place_rpy, params)

        # Pairwise geometry over the (i, j) task grid.
        i_start = np.broadcast_to(ee1.pos, (n, n, 3))
        i_pick = np.broadcast_to(pick_pos[:, None, :], (n, n, 3))
        j_start = np.broadcast_to(ee2.pos, (n, n, 3))
        j_pick = np.broadcast_to(pick_pos[None, :, :], (n, n, 3))
        mv_clear = segment_distance(i_start, i_pick, j_start, j_pick)
        i_place = np.broadcast_to(place_pos[:, None, :], (n, n, 3))
        j_place = np.broadcast_to(place_pos[None, :, :], (n, n, 3))
        tf_clear = segment_distance(i_pick, i_place, j_pick, j_place)

        pick_sep = np.linalg.norm(pick_pos[:, None, :] - pick_pos[None, :, :], axis=-1)
        place_sep = np.linalg.norm(place_pos[:, None, :] - place_pos[None, :, :], axis=-1)

        feas = (
            (pick_sep >= params.safe_separation)
            & (place_sep >= params.safe_separation)
            & (mv_clear >= params.collision_clearance)
            & (tf_clear >= params.collision_clearance)
        )
        undone = ~graph.done
        feas &= undone[:, None] & undone[None, :]
        np.fill_diagonal(feas, False)

        gain = params.effective_overlap_gain
        mv_ov = np.clip(1.0 - mv_clear / params.overlap_range, 0.0, None)
        tf_ov = np.clip(1.0 - tf_clear / params.overlap_range, 0.0, None)
        mv_cost = np.maximum(t_mv1[:, None], t_mv2[None, :]) * (1.0 + gain * mv_ov)
        tf_cost = np.maximum(t_tf[:, None], t_tf[None, :]) * (1.0 + gain * tf_ov)

        ok[:n, :n] = feas
        move[:n, :n] = np.where(feas, mv_cost, np.inf)
        transfer[:n, :n] = np.where(feas, tf_cost, np.inf)

        if params.allow_idle and not graph.all_done:
            # One arm works, the other holds position.
            for row_side in (True, False):
                cells = []
                for i in graph.unfinished():
                    t1, t2 = (i, None) if row_side else (None, i)
                    cells.append((i, pair_cost(graph, t1, t2, params)))
                for i, cc in cells:
                    r, c = (i, ret) if row_side else (ret, i)
                    ok[r, c] = cc.feasible
                    move[r, c] = cc.move_time
                    transfer[r, c] = cc.transfer_time

    if graph.all_done and not (graph.returned[0] and graph.returned[1]):
        rc = return_cost(graph, params)
        if np.isfinite(rc):
            ok[ret, ret] = True
            move[ret, ret] = rc
            transfer[ret, ret] = 0.0

    return CooperativeCostMatrix(move=move, transfer=transfer, feasible=ok)


def global_mask(
    feasible_bits: NDArray[np.bool_], graph: TaskStateGraph, allow_idle: bool = False
) -> NDArray[np.bool_]:
    """Overlay structural legality on externally produced feasibility bits.

    Used with estimated matrices: whatever a predictor thinks, a finished
    task, the diagonal, and a premature return stay masked.
    """
    n = graph.n
    ret = return_index(n)
    mask = np.asarray(feasible_bits, dtype=bool).copy()
    if mask.shape != (n + 1, n + 1):
        raise ValueError(f"mask shape {mask.shape} does not fit n={n}")
    done_idx = np.flatnonzero(graph.done)
    mask[done_idx, :] = False
    mask[:, done_idx] = False
    diag = np.arange(n)
    mask[diag, diag] = False
    if graph.all_done:
        mask[:ret, :] = False
        mask[:, :ret] = False
        mask[ret, ret] = bool(feasible_bits[ret, ret])
    else:
        mask[ret, ret] = False
        if not allow_idle:
            mask[ret, :] = False
            mask[:, ret] = False
    return mask


class CostOracle:
    """Exact matrix source: rebuilds the dense cost matrix from geometry."""

    def __init__(self, params: KinematicParams | None = None):
        self.params = params or KinematicParams()

    def matrix(self, graph: TaskStateGraph) -> CooperativeCostMatrix:
        return build_cost_matrix(graph, self.params)

    def with_variant(self, variant: OracleVariant) -> "CostOracle":
        return CostOracle(replace(self.params, variant=variant))


class FailureModel:
    """Per-step execution failure draws, reproducible per seed."""

    def __init__(self, p_fail: float, seed: int = 0):
        if not (0.0 <= p_fail < 1.0):
            raise ValueError(f"p_fail must be in [0, 1), got {p_fail}")
        self.p_fail = p_fail
        self.rng = np.random.default_rng([int(seed), 0x5AFE])

    def draw_failure(self) -> bool:
        return bool(self.rng.random() < self.p_fail)


@dataclass
class StepOutcome:
    status: EpisodeStatus
    failed: bool
    cell: CellCost


class EpisodeEngine:
    """Stateful episode runner: matrix per state, action application, log.

    The matrix source is anything with ``matrix(graph)``; pass a FailureModel
    to get stochastic execution failures (the state does not advance on a
    failed step, the caller decides what to do next).
    """

    def __init__(self, graph: TaskStateGraph, source, failure: FailureModel | None = None):
        self.graph = graph.clone()
        self.source = source
        self.failure = failure
        self.log = EpisodeLog()
        self._matrix: CooperativeCostMatrix | None = None

    def matrix(self) -> CooperativeCostMatrix:
        if self._matrix is None:
            self._matrix = self.source.matrix(self.graph)
        return self._matrix

    def status(self) -> EpisodeStatus:
        return episode_status(self.graph, self.matrix().feasible)

    def step(self, action: JointAction) -> StepOutcome:
        cell = self.matrix().cell(action.a1, action.a2)
        ret = return_index(self.graph.n)
        is_return = action.a1 == ret and action.a2 == ret
        if self.failure is not None and self.failure.draw_failure():
            # Execution failed mid-motion; arms recover to their prior poses.
            return StepOutcome(self.status(), True, cell)
        self.graph = apply_joint_action(self.graph, action, cell)
        self._matrix = None
        if is_return:
            self.log.return_time = cell.move_time
        else:
            self.log.records.append(
                StepRecord(action=action, move_time=cell.move_time, transfer_time=cell.transfer_time)
            )
        st = self.status()
        self.log.status = st
        return StepOutcome(st, False, cell)


def simulate_actions(
    graph: TaskStateGraph,
    actions: list[JointAction],
    params: KinematicParams,
    auto_return: bool = True,
) -> EpisodeLog:
    """Run a fixed action sequence under the exact oracle and return the log.

    With auto_return, appends the final joint return once every task is done.
    """
    engine = EpisodeEngine(graph, CostOracle(params))
    for act in actions:
        engine.step(act)
    if auto_return and engine.graph.all_done and not engine.graph.returned[0]:
        ret = return_index(engine.graph.n)
        engine.step(JointAction(ret, ret))
    return engine.log


def params_from_config(path_or_sections) -> KinematicParams:
    """Build oracle params from an INI file (or pre-parsed section dict).

    Recognized keys in [oracle]: linear_speed, angular_speed, overlap_gain,
    overlap_range, safe_separation, collision_clearance, variant, allow_idle,
    p_fail. Missing keys keep their defaults.
    """
    if isinstance(path_or_sections, dict):
        section = dict(path_or_sections.get("oracle", {}))
    else:
        cp = configparser.ConfigParser()
        read = cp.read(str(path_or_sections))
        if not read:
            raise FileNotFoundError(f"config file not found: {path_or_sections}")
        section = dict(cp["oracle"]) if cp.has_section("oracle") else {}
    kwargs: dict = {}
    for key in (
        "linear_speed",
        "angular_speed",
        "overlap_gain",
        "overlap_range",
        "safe_separation",
        "collision_clearance",
        "p_fail",
    ):
        if key in section:
            kwargs[key] = float(section[key])
    if "variant" in section:
        kwargs["variant"] = OracleVariant(section["variant"].strip().lower())
    if "allow_idle" in section:
        kwargs["allow_idle"] = section["allow_idle"].strip().lower() in ("1", "true", "yes", "on")
    return KinematicParams(**kwargs)
