"""Learned stand-in for the cost oracle.

A plain MLP maps a pair query (both arms' current poses, both tasks'
pick/place poses, object bounding box) to per-phase feasibility logits and
per-phase durations. Trained on oracle-labeled random queries; at planning
time it fills the cooperative cost matrix, with graph-structural
infeasibilities (same task, finished task, return gating) applied exactly
on top of whatever the model believes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    Arm,
    BOX_EDGE,
    DEPOT_POSES,
    Pose,
    RearrangeTask,
    TABLE_BOUNDS,
    TaskStateGraph,
    WORKSPACE_BOUNDS,
    build_state_graph,
    return_index,
)
from .costmodel import (
    CellCost,
    CooperativeCostMatrix,
    CostOracle,
    pair_cost,
    phase_feasibility,
)
from .nn import (
    Adam,
    ParameterStore,
    Tensor,
    backward,
    bce_with_logits,
    linear,
    load_checkpoint,
    save_checkpoint,
    silu,
)

__all__ = [
    "PREDICTOR_INPUT_DIM",
    "PairQuery",
    "PredictorSample",
    "PredictorData",
    "PredictorConfig",
    "PredictorModel",
    "PredictorSource",
    "TrainPredictorConfig",
    "Diverged",
    "sample_predictor_dataset",
    "train_predictor",
    "predict_pair",
    "predict_cost_matrix",
    "evaluate_predictor",
    "save_predictor",
    "load_predictor",
]

PREDICTOR_INPUT_DIM = 57  # 6 poses x (3 positions + 3 angles as sin/cos) + bbox
_POSE_SLOTS = 6
_TIME_FLOOR = 1e-3  # relative-error denominators never go below this


class Diverged(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class PairQuery:
    arm1_current: Pose
    arm2_current: Pose
    arm1_pick: Pose
    arm1_place: Pose
    arm2_pick: Pose
    arm2_place: Pose
    bbox: np.ndarray = field(default_factory=lambda: np.full(3, BOX_EDGE))

    def __post_init__(self):
        bbox = np.asarray(self.bbox, dtype=float)
        if bbox.shape != (3,) or not (bbox > 0).all():
            raise ValueError("bbox must be a strictly positive 3-vector")
        object.__setattr__(self, "bbox", bbox)
        for pose in self.poses():
            for axis, (lo, hi) in enumerate(WORKSPACE_BOUNDS):
                v = pose.pos[axis]
                if not (lo - 1e-9 <= v <= hi + 1e-9):
                    raise ValueError(f"query pose outside workspace on axis {axis}: {v}")

    def poses(self) -> tuple[Pose, ...]:
        return (
            self.arm1_current,
            self.arm2_current,
            self.arm1_pick,
            self.arm1_place,
            self.arm2_pick,
            self.arm2_place,
        )


@dataclass(frozen=True)
class PredictorSample:
    query: PairQuery
    label: CellCost
    transit_ok: bool
    transfer_ok: bool


class PredictorData:
    """Array-backed sequence of PredictorSample.

    Holds raw pose parameters (N, 6 slots, pos+rpy) so individual samples can
    be materialized on demand without keeping N*6 Pose objects alive.
    """

    def __init__(self, poses: np.ndarray, bbox: np.ndarray, phase_ok: np.ndarray, times: np.ndarray):
        self.poses = poses  # (N, 6, 6) float64: [x y z roll pitch yaw]
        self.bbox = bbox  # (N, 3)
        self.phase_ok = phase_ok  # (N, 2) bool: transit, transfer
        self.times = times  # (N, 2) float64: move, transfer (inf when infeasible)

    @property
    def feasible(self) -> np.ndarray:
        return self.phase_ok.all(axis=1)

    def __len__(self) -> int:
        return self.poses.shape[0]

    def __getitem__(self, i: int) -> PredictorSample:
        p = [Pose(row[:3], row[3:]) for row in self.poses[i]]
        query = PairQuery(*p, bbox=self.bbox[i])
        feas = bool(self.phase_ok[i].all())
        mv, tf = (float(self.times[i, 0]), float(self.times[i, 1]))
        return PredictorSample(
            query=query,
            label=CellCost(mv, tf, feas),
            transit_ok=bool(self.phase_ok[i, 0]),
            transfer_ok=bool(self.phase_ok[i, 1]),
        )

    def subset(self, idx: np.ndarray) -> "PredictorData":
        return PredictorData(self.poses[idx], self.bbox[idx], self.phase_ok[idx], self.times[idx])

    def split(self, held_out: float, seed: int) -> tuple["PredictorData", "PredictorData"]:
        n = len(self)
        k = max(1, int(round(n * held_out)))
        perm = np.random.default_rng([seed, 1]).permutation(n)
        return self.subset(perm[k:]), self.subset(perm[:k])


# -- sampling ----------------------------------------------------------------


def _table_point(rng) -> np.ndarray:
    (x0, x1), (y0, y1), _ = TABLE_BOUNDS
    return np.array([rng.uniform(x0, x1), rng.uniform(y0, y1), 0.0])


def _separated_points(rng, count: int, min_sep: float = 0.06) -> list[np.ndarray]:
    pts: list[np.ndarray] = []
    while len(pts) < count:
        p = _table_point(rng)
        if all(np.linalg.norm(p[:2] - q[:2]) >= min_sep for q in pts):
            pts.append(p)
    return pts


def sample_predictor_dataset(
    count: int,
    oracle: CostOracle,
    seed: int,
    depot_prob: float = 0.25,
) -> PredictorData:
    """Oracle-labeled random pair queries.

    Task endpoints follow the dataset sampling rules (uniform on the table,
    minimum separation). Arm current poses are the two depot rest poses with
    probability ``depot_prob`` (the episode-start state) and otherwise
    uniform table poses, matching where arms actually sit mid-episode.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng([seed])
    params = oracle.params
    scratch = build_state_graph(
        [
            RearrangeTask(Pose([-0.2, 0.0, 0.0], [0, 0, 0]), Pose([0.2, 0.0, 0.0], [0, 0, 0])),
            RearrangeTask(Pose([-0.2, 0.3, 0.0], [0, 0, 0]), Pose([0.2, 0.3, 0.0], [0, 0, 0])),
        ]
    )
    poses = np.empty((count, _POSE_SLOTS, 6))
    bbox = np.tile(np.full(3, BOX_EDGE), (count, 1))
    phase_ok = np.empty((count, 2), dtype=bool)
    times = np.empty((count, 2))
    for k in range(count):
        pts = _separated_points(rng, 4)
        yaws = rng.uniform(-np.pi, np.pi, size=6)
        if rng.uniform() < depot_prob:
            cur1 = Pose(np.array(DEPOT_POSES[0]), np.zeros(3))
            cur2 = Pose(np.array(DEPOT_POSES[1]), np.zeros(3))
        else:
            cur1 = Pose(_table_point(rng), [0.0, 0.0, yaws[4]])
            cur2 = Pose(_table_point(rng), [0.0, 0.0, yaws[5]])
        task1 = RearrangeTask(Pose(pts[0], [0, 0, yaws[0]]), Pose(pts[1], [0, 0, yaws[1]]))
        task2 = RearrangeTask(Pose(pts[2], [0, 0, yaws[2]]), Pose(pts[3], [0, 0, yaws[3]]))
        scratch.tasks[0] = task1
        scratch.tasks[1] = task2
        scratch.depots[Arm.ARM1].current = cur1
        scratch.depots[Arm.ARM2].current = cur2
        ok = phase_feasibility(scratch, 0, 1, params)
        cell = pair_cost(scratch, 0, 1, params)
        for s, pose in enumerate(
            (cur1, cur2, task1.pick, task1.place, task2.pick, task2.place)
        ):
            poses[k, s, :3] = pose.pos
            poses[k, s, 3:] = pose.rpy
        phase_ok[k] = ok
        times[k] = (cell.move_time, cell.transfer_time)
    return PredictorData(poses, bbox, phase_ok, times)


# -- features ----------------------------------------------------------------

_WS_CENTER = np.array([(lo + hi) / 2 for lo, hi in WORKSPACE_BOUNDS])
_WS_HALF = np.array([(hi - lo) / 2 for lo, hi in WORKSPACE_BOUNDS])


def featurize(poses: np.ndarray, bbox: np.ndarray) -> np.ndarray:
    """(N, 6, 6) pose parameters + (N, 3) bbox -> (N, 57) float32."""
    pos = (poses[..., :3] - _WS_CENTER) / _WS_HALF
    ang = poses[..., 3:]
    enc = np.concatenate(
        [pos, np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(*ang.shape[:-1], 6)],
        axis=-1,
    )
    flat = enc.reshape(enc.shape[0], _POSE_SLOTS * 9)
    return np.concatenate([flat, bbox / BOX_EDGE], axis=-1).astype(np.float32)


def query_features(query: PairQuery) -> np.ndarray:
    rows = np.array([np.concatenate([p.pos, p.rpy]) for p in query.poses()])
    return featurize(rows[None], np.asarray(query.bbox, dtype=float)[None])[0]


# -- model -------------------------------------------------------------------


@dataclass(frozen=True)
class PredictorConfig:
    hidden: int = 512
    layers: int = 3
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "layers": self.layers, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        return cls(**d)


class PredictorModel:
    """MLP with two feasibility logits (transit, transfer) and two times."""

    def __init__(self, config: PredictorConfig = PredictorConfig(), seed: int = 0,
                 store: ParameterStore | None = None):
        self.config = config
        self.store = store if store is not None else ParameterStore(seed, dtype=np.float32)
        width = config.hidden
        dims = [PREDICTOR_INPUT_DIM] + [width] * config.layers
        for l in range(config.layers):
            self.store.param(f"fc{l}/w", (dims[l], dims[l + 1]), fan_in=dims[l])
            self.store.param(f"fc{l}/b", (dims[l + 1],), fan_in=dims[l])
        self.store.param("head/w", (width, 4), fan_in=width)
        self.store.param("head/b", (4,), fan_in=width)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for l in range(self.config.layers):
            h = silu(linear(h, self.store[f"fc{l}/w"], self.store[f"fc{l}/b"]))
        return linear(h, self.store["head/w"], self.store["head/b"])

    def infer(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Tape-free forward: (N, 57) -> probs (N, 2), times (N, 2) > 0.

        Time heads emit log-seconds; decoding exponentiates them.
        """
        h = np.asarray(X, dtype=np.float32)
        for l in range(self.config.layers):
            h = h @ self.store[f"fc{l}/w"].data + self.store[f"fc{l}/b"].data
            h = h * (1.0 / (1.0 + np.exp(-np.clip(h, -60, 60))))
        out = h @ self.store["head/w"].data + self.store["head/b"].data
        probs = 1.0 / (1.0 + np.exp(-np.clip(out[:, :2], -60, 60)))
        times = np.exp(np.clip(out[:, 2:], -20.0, 20.0).astype(np.float64))
        return probs, times


# -- training ----------------------------------------------------------------


@dataclass
class TrainPredictorConfig:
    epochs: int = 40
    lr: float = 6e-3
    lr_min: float = 1e-5
    batch: int = 512
    split: float = 0.1
    seed: int = 0
    time_loss_weight: float = 1.0


def _loss_on(model: PredictorModel, X: np.ndarray, phase_ok: np.ndarray,
             times: np.ndarray, weight: float) -> tuple[Tensor, float, float]:
    out = model.forward(Tensor(X, requires_grad=False))
    logits = out[:, :2]
    pred_log_t = out[:, 2:]
    cls = bce_with_logits(logits, phase_ok.astype(np.float32))
    # log-residual charbonnier: |exp(d) - 1| ~ |d| for small d, so this is a
    # smooth surrogate for relative time error; infeasible rows contribute 0
    feas = phase_ok.all(axis=1)
    nfeas = max(1, int(feas.sum()))
    safe_t = np.where(feas[:, None], times, 1.0)
    target = np.log(np.maximum(safe_t, _TIME_FLOOR)).astype(np.float32)
    mask = feas[:, None].astype(np.float32)
    d = (pred_log_t - target) * mask
    charb = (d * d + np.float32(1e-6)) ** 0.5
    reg = charb.sum() * (weight / (2.0 * nfeas))
    total = cls + reg
    return total, float(cls.data), float(reg.data)


def train_predictor(
    data: PredictorData,
    config: TrainPredictorConfig = TrainPredictorConfig(),
    model: PredictorModel | None = None,
    model_config: PredictorConfig = PredictorConfig(),
    log: list | None = None,
) -> PredictorModel:
    """Minimize feasibility BCE + relative time error on feasible samples."""
    if len(data) < 2:
        raise ValueError("dataset too small to split")
    model = model if model is not None else PredictorModel(model_config, seed=config.seed)
    train, val = data.split(config.split, config.seed)
    Xtr = featurize(train.poses, train.bbox)
    opt = Adam(model.store, lr=config.lr)
    steps_per_epoch = max(1, len(train) // config.batch)
    total_steps = config.epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, 2, epoch]).permutation(len(train))
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            opt.lr = config.lr_min + 0.5 * (config.lr - config.lr_min) * (
                1.0 + np.cos(np.pi * step / total_steps)
            )
            step += 1
            idx = perm[s * config.batch : (s + 1) * config.batch]
            loss, _, _ = _loss_on(
                model, Xtr[idx], train.phase_ok[idx], train.times[idx], config.time_loss_weight
            )
            if not np.isfinite(loss.data):
                raise Diverged(f"non-finite loss at epoch {epoch}, step {s}")
            model.store.zero_grad()
            backward(loss)
            opt.step()
            epoch_loss += float(loss.data)
        metrics = evaluate_predictor(model, val)
        entry = {
            "epoch": epoch,
            "train_loss": epoch_loss / steps_per_epoch,
            "val_mask_accuracy": metrics["mask_accuracy"],
            "val_time_error": metrics["mean_relative_time_error"],
        }
        if log is not None:
            log.append(entry)
    return model


# -- inference ---------------------------------------------------------------


def predict_pair(model: PredictorModel, query: PairQuery) -> CellCost:
    probs, times = model.infer(query_features(query)[None])
    thr = model.config.threshold
    feasible = bool((probs[0] >= thr).all())
    return CellCost(float(times[0, 0]), float(times[0, 1]), feasible)


def predict_cost_matrix(
    model: PredictorModel, graph: TaskStateGraph, arm: Arm = Arm.ARM1
) -> CooperativeCostMatrix:
    """Model-filled cost matrix; structural rules override the model exactly."""
    if arm is Arm.ARM2:
        M = predict_cost_matrix(model, graph, Arm.ARM1)
        return CooperativeCostMatrix(
            move=M.move.T.copy(), transfer=M.transfer.T.copy(), feasible=M.feasible.T.copy()
        )
    n = graph.n
    ret = return_index(n)
    m1 = n + 1
    move = np.zeros((m1, m1))
    transfer = np.zeros((m1, m1))
    feasible = np.zeros((m1, m1), dtype=bool)
    undone = [t for t in range(n) if not graph.done[t]]
    cells = [(i, j) for i in undone for j in undone if i != j]
    if cells:
        cur1 = graph.ee_pose(Arm.ARM1)
        cur2 = graph.ee_pose(Arm.ARM2)
        cur_rows = np.array(
            [np.concatenate([cur1.pos, cur1.rpy]), np.concatenate([cur2.pos, cur2.rpy])]
        )
        poses = np.empty((len(cells), _POSE_SLOTS, 6))
        for k, (i, j) in enumerate(cells):
            poses[k, :2] = cur_rows
            for s, pose in enumerate(
                (graph.tasks[i].pick, graph.tasks[i].place, graph.tasks[j].pick, graph.tasks[j].place)
            ):
                poses[k, 2 + s, :3] = pose.pos
                poses[k, 2 + s, 3:] = pose.rpy
        bbox = np.tile(np.full(3, BOX_EDGE), (len(cells), 1))
        probs, times = model.infer(featurize(poses, bbox))
        ok = (probs >= model.config.threshold).all(axis=1)
        for k, (i, j) in enumerate(cells):
            if ok[k]:
                feasible[i, j] = True
                move[i, j] = times[k, 0]
                transfer[i, j] = times[k, 1]
    if graph.all_done:
        feasible[ret, ret] = True  # selection-only cell; executed cost is the oracle's
    return CooperativeCostMatrix(move=move, transfer=transfer, feasible=feasible)


class PredictorSource:
    """Matrix source for planners, mirroring CostOracle's interface."""

    def __init__(self, model: PredictorModel):
        self.model = model

    def matrix(self, graph: TaskStateGraph) -> CooperativeCostMatrix:
        return predict_cost_matrix(self.model, graph)


def evaluate_predictor(model: PredictorModel, data: PredictorData) -> dict:
    X = featurize(data.poses, data.bbox)
    probs, times = model.infer(X)
    pred_feas = (probs >= model.config.threshold).all(axis=1)
    true_feas = data.feasible
    accuracy = float((pred_feas == true_feas).mean())
    if true_feas.any():
        t = data.times[true_feas]
        rel = np.abs(times[true_feas] - t) / np.maximum(t, _TIME_FLOOR)
        time_err = float(rel.mean())
    else:
        time_err = 0.0
    return {"mask_accuracy": accuracy, "mean_relative_time_error": time_err}


# -- persistence -------------------------------------------------------------


def save_predictor(path: str | Path, model: PredictorModel, meta: dict | None = None) -> Path:
    path = Path(path)
    save_checkpoint(path, model.store, extra={"predictor_config": model.config.to_dict()})
    sidecar = dict(meta or {})
    sidecar["predictor_config"] = model.config.to_dict()
    path.with_suffix(".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_predictor(path: str | Path) -> tuple[PredictorModel, dict]:
    store, extra = load_checkpoint(path)
    config = PredictorConfig.from_dict(extra["predictor_config"])
    model = PredictorModel(config, store=store)
    meta_path = Path(path).with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return model, meta
