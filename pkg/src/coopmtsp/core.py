"""Task state graph for cooperative two-arm tabletop rearrangement.

The planning state is a graph with one node per rearrangement task (a pick pose
and a place pose) plus one depot node per arm. A joint action assigns each arm
one unfinished task, or sends both arms home once every task is done. Costs are
attached by the cost model; this module only tracks state, legality, and the
episode ledger.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "TABLE_BOUNDS",
    "WORKSPACE_BOUNDS",
    "DEPOT_POSES",
    "BOX_EDGE",
    "Arm",
    "EpisodeStatus",
    "Pose",
    "RearrangeTask",
    "DepotState",
    "TaskStateGraph",
    "JointAction",
    "StepRecord",
    "EpisodeLog",
    "OddTaskCount",
    "PoseOutOfWorkspace",
    "InfeasibleAction",
    "TaskAlreadyDone",
    "SameTaskAssigned",
    "IncompleteLog",
    "wrap_angle",
    "build_state_graph",
    "default_depots",
    "return_index",
    "apply_joint_action",
    "episode_status",
    "cumulative_cost",
    "observation_features",
    "NODE_FEATURE_DIM",
]

# Tabletop extent (meters); objects are sampled on the table surface.
TABLE_BOUNDS = ((-0.8, 0.8), (-0.5, 0.5), (0.0, 0.0))
# Reachable box for validation; slightly larger than the table so depot poses
# hovering off the table edge are legal.
WORKSPACE_BOUNDS = ((-0.85, 0.85), (-0.75, 0.75), (-0.01, 0.45))
# Rest pose of each arm's end effector, facing the table from opposite sides.
DEPOT_POSES = ((0.0, -0.7, 0.3), (0.0, 0.7, 0.3))
# Edge length of the cubes being rearranged (meters).
BOX_EDGE = 0.06

NODE_FEATURE_DIM = 26


class Arm(IntEnum):
    ARM1 = 0
    ARM2 = 1

    @property
    def other(self) -> "Arm":
        return Arm(1 - int(self))


class EpisodeStatus(Enum):
    ONGOING = "ongoing"
    SUCCESS = "success"
    DEADLOCK = "deadlock"


class OddTaskCount(ValueError):
    """Raised when the task list cannot be split into arm pairs."""


class PoseOutOfWorkspace(ValueError):
    """Raised when a pick/place/depot pose leaves the reachable box."""


class InfeasibleAction(RuntimeError):
    """Raised when a joint action's cost cell is marked infeasible."""


class TaskAlreadyDone(RuntimeError):
    """Raised when a joint action re-assigns a finished task."""


class SameTaskAssigned(RuntimeError):
    """Raised when both arms are assigned the same task."""


class IncompleteLog(RuntimeError):
    """Raised when a cumulative cost is requested for an unfinished episode."""


def wrap_angle(a):
    """Wrap angles into [-pi, pi). Works on scalars and arrays."""
    return (np.asarray(a, dtype=np.float64) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class Pose:
    """End-effector pose: position (m) and roll/pitch/yaw (rad, wrapped)."""

    pos: NDArray[np.float64]
    rpy: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(3).copy()
        self.rpy = wrap_angle(np.asarray(self.rpy, dtype=np.float64).reshape(3))

    def as_array(self) -> NDArray[np.float64]:
        return np.concatenate([self.pos, self.rpy])

    def copy(self) -> "Pose":
        return Pose(self.pos.copy(), self.rpy.copy())

    def almost_equal(self, other: "Pose", tol: float = 1e-12) -> bool:
        return bool(
            np.all(np.abs(self.pos - other.pos) <= tol)
            and np.all(np.abs(wrap_angle(self.rpy - other.rpy)) <= tol)
        )


@dataclass
class RearrangeTask:
    """One object move: grasp at ``pick``, release at ``place``."""

    pick: Pose
    place: Pose


@dataclass
class DepotState:
    """Depot node for one arm: the rest pose and the live end-effector pose."""

    initial: Pose
    current: Pose


@dataclass
class JointAction:
    """Per-arm task indices; index n (== return_index) sends the arm home."""

    a1: int
    a2: int

    def as_tuple(self) -> tuple[int, int]:
        return (self.a1, self.a2)


@dataclass
class StepRecord:
    action: JointAction
    move_time: float
    transfer_time: float


@dataclass
class EpisodeLog:
    records: list[StepRecord] = field(default_factory=list)
    return_time: float | None = None
    status: EpisodeStatus = EpisodeStatus.ONGOING


@dataclass
class TaskStateGraph:
    """Mutable-by-copy planning state: tasks, depots, done flags, return flags."""

    tasks: list[RearrangeTask]
    depots: tuple[DepotState, DepotState]
    done: NDArray[np.bool_]
    returned: tuple[bool, bool] = (False, False)

    @property
    def n(self) -> int:
        return len(self.tasks)

    @property
    def all_done(self) -> bool:
        return bool(self.done.all())

    def unfinished(self) -> list[int]:
        return [i for i in range(self.n) if not self.done[i]]

    def ee_pose(self, arm: Arm) -> Pose:
        return self.depots[arm].current

    def clone(self) -> "TaskStateGraph":
        return copy.deepcopy(self)

    def state_key(self) -> tuple:
        """Hashable key for memoization: done set + arm whereabouts."""
        locs = tuple(
            tuple(np.round(d.current.as_array(), 12)) for d in self.depots
        )
        return (self.done.tobytes(), locs, self.returned)


def default_depots() -> tuple[DepotState, DepotState]:
    out = []
    for pos in DEPOT_POSES:
        pose = Pose(np.array(pos), np.zeros(3))
        out.append(DepotState(initial=pose, current=pose.copy()))
    return (out[0], out[1])


def _check_workspace(pose: Pose, what: str) -> None:
    for axis, (lo, hi) in enumerate(WORKSPACE_BOUNDS):
        v = float(pose.pos[axis])
        if not (lo <= v <= hi):
            raise PoseOutOfWorkspace(
                f"{what}: axis {axis} value {v:.4f} outside [{lo}, {hi}]"
            )


def build_state_graph(
    tasks: list[RearrangeTask],
    depots: tuple[DepotState, DepotState] | None = None,
) -> TaskStateGraph:
    """Validate tasks and depots and produce the initial state graph.

    Raises OddTaskCount for task lists that cannot be halved, and
    PoseOutOfWorkspace for any pose outside the reachable box.
    """
    if len(tasks) % 2 != 0:
        raise OddTaskCount(f"need an even task count, got {len(tasks)}")
    if depots is None:
        depots = default_depots()
    for i, t in enumerate(tasks):
        _check_workspace(t.pick, f"task {i} pick")
        _check_workspace(t.place, f"task {i} place")
    for k, d in enumerate(depots):
        _check_workspace(d.initial, f"depot {k} initial")
        _check_workspace(d.current, f"depot {k} current")
    n = len(tasks)
    return TaskStateGraph(
        tasks=[RearrangeTask(t.pick.copy(), t.place.copy()) for t in tasks],
        depots=(
            DepotState(depots[0].initial.copy(), depots[0].current.copy()),
            DepotState(depots[1].initial.copy(), depots[1].current.copy()),
        ),
        done=np.zeros(n, dtype=bool),
    )


def return_index(n: int) -> int:
    """Action index that sends an arm home in an n-task graph."""
    return n


def apply_joint_action(graph: TaskStateGraph, action: JointAction, cell) -> TaskStateGraph:
    """Apply one joint action and return the successor graph.

    ``cell`` is the cost-matrix entry for this action; anything with
    ``feasible`` is accepted. Task assignments mark the task done and leave the
    arm at the task's place pose. A return action with unfinished tasks leaves
    the arm where it is (an idle wait, only reachable when the oracle allows
    it); once every task is done it moves the arm to its depot rest pose and
    marks it returned.
    """
    n = graph.n
    ret = return_index(n)
    a = action.as_tuple()
    for k in (0, 1):
        if not (0 <= a[k] <= ret):
            raise InfeasibleAction(f"arm {k + 1} action {a[k]} out of range 0..{ret}")
    if a[0] == a[1] and a[0] != ret:
        raise SameTaskAssigned(f"both arms assigned task {a[0]}")
    for k in (0, 1):
        if a[k] != ret and graph.done[a[k]]:
            raise TaskAlreadyDone(f"task {a[k]} already done")
    if not bool(getattr(cell, "feasible")):
        raise InfeasibleAction(f"joint action {a} marked infeasible")

    out = graph.clone()
    for k in (0, 1):
        if a[k] == ret:
            if out.all_done:
                out.depots[k].current = out.depots[k].initial.copy()
                flags = list(out.returned)
                flags[k] = True
                out.returned = (flags[0], flags[1])
            # else: idle wait, pose unchanged
        else:
            out.done[a[k]] = True
            out.depots[k].current = out.tasks[a[k]].place.copy()
    return out


def episode_status(
    graph: TaskStateGraph,
    joint_mask: NDArray[np.bool_] | None = None,
) -> EpisodeStatus:
    """Classify the state: SUCCESS, DEADLOCK (mask empty), or ONGOING.

    ``joint_mask`` is the (n+1)x(n+1) feasibility mask for the current state;
    without it a non-terminal state is always reported ONGOING.
    """
    if graph.all_done and graph.returned[0] and graph.returned[1]:
        return EpisodeStatus.SUCCESS
    if joint_mask is not None and not bool(np.asarray(joint_mask).any()):
        return EpisodeStatus.DEADLOCK
    return EpisodeStatus.ONGOING


def cumulative_cost(log: EpisodeLog) -> float:
    """Total episode cost: per-step move + transfer times plus the return leg.

    Only defined for successful episodes; raises IncompleteLog otherwise.
    """
    if log.status is not EpisodeStatus.SUCCESS or log.return_time is None:
        raise IncompleteLog(f"episode status {log.status.value}, no total cost")
    total = float(log.return_time)
    for rec in log.records:
        total += float(rec.move_time) + float(rec.transfer_time)
    return total


def _node_row(abs_block, ee: Pose, done: float, is_depot: float):
    abs_block = np.asarray(abs_block, dtype=np.float64)
    rel = np.empty(12, dtype=np.float64)
    for half in range(2):  # two poses per node
        base = 6 * half
        rel[base : base + 3] = abs_block[base : base + 3] - ee.pos
        rel[base + 3 : base + 6] = wrap_angle(abs_block[base + 3 : base + 6] - ee.rpy)
    return np.concatenate([abs_block, rel, [done, is_depot]])


def observation_features(
    graph: TaskStateGraph, arm: Arm
) -> tuple[NDArray[np.float64], list[int]]:
    """Per-node features from one arm's point of view.

    Rows: unfinished tasks in index order, then the arm's own depot, then the
    opposing depot. Each row is 26 numbers: the node's two poses (task: pick
    then place; depot: rest then current), the same poses relative to the
    arm's end effector (positions subtracted, angles wrapped), a done flag,
    and a depot flag. Returns (features, task_index_map) where the map gives
    the original task index of each task row.
    """
    ee = graph.ee_pose(arm)
    rows = []
    index_map = []
    for i in graph.unfinished():
        t = graph.tasks[i]
        abs_block = np.concatenate([t.pick.as_array(), t.place.as_array()])
        rows.append(_node_row(abs_block, ee, 0.0, 0.0))
        index_map.append(i)
    for k in (arm, arm.other):
        d = graph.depots[k]
        abs_block = np.concatenate([d.initial.as_array(), d.current.as_array()])
        rows.append(_node_row(abs_block, ee, 0.0, 1.0))
    return np.stack(rows, axis=0), index_map
