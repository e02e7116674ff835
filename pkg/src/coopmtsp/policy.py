"""Attention policy over joint two-arm actions.

Each arm sees the same structure from its own side: per-node features for the
unfinished tasks plus both depots, and the dense cooperative cost grid aligned
so that rows are its own action choices. The arms share one parameter set;
arm2's view is the transpose of arm1's, and the cooperative encoder is exactly
transpose-equivariant, so the grid is encoded once and flipped.

Action slots per arm: the unfinished tasks in index order, then the arm's own
depot (the return/home action). The opposing depot participates in node
encoding but is dropped before action scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numpy.typing import NDArray

from .core import Arm, JointAction, TaskStateGraph, observation_features, return_index
from .costmodel import CooperativeCostMatrix
from .nn import (
    ParameterStore,
    Tensor,
    concat,
    einsum,
    layer_norm,
    linear,
    masked_softmax,
    multi_head_attention,
    silu,
)

__all__ = [
    "PolicyConfig",
    "PolicyParams",
    "PolicyObservation",
    "BatchObservation",
    "ActionDistribution",
    "SelectMode",
    "build_observation",
    "collate",
    "encode_nodes",
    "encode_coop",
    "generate_action_probs",
    "joint_probability_map",
    "value_estimate",
    "policy_forward",
    "select_action",
    "FastPolicy",
]


class SelectMode(Enum):
    ARGMAX = "argmax"
    SAMPLE = "sample"


@dataclass(frozen=True)
class PolicyConfig:
    node_dim: int = 128
    coop_dim: int = 32      # internal width of the grid encoder
    heads: int = 8
    node_layers: int = 2
    coop_layers: int = 2
    gen_layers: int = 2
    head_hidden: int = 128
    value_hidden: int = 128
    head_scale: float = 0.1  # shrinks the final logit layer toward uniform init
    coop_encoder: str = "row_col"   # row_col | mlp | full  (ablation variants)
    generator: str = "mhca"         # mhca | mhsa | mlp     (ablation variants)

    def __post_init__(self) -> None:
        if self.coop_encoder not in ("row_col", "mlp", "full"):
            raise ValueError(f"unknown coop_encoder {self.coop_encoder!r}")
        if self.generator not in ("mhca", "mhsa", "mlp"):
            raise ValueError(f"unknown generator {self.generator!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class PolicyParams:
    """Parameter set for the full policy; creates every tensor up front."""

    FEATURE_DIM = 26
    COOP_FEATURES = 3

    def __init__(self, config: PolicyConfig | None = None, seed: int = 0, dtype=np.float64,
                 store: ParameterStore | None = None):
        self.config = config or PolicyConfig()
        self.store = store if store is not None else ParameterStore(seed=seed, dtype=dtype)
        self._build()

    def _lin(self, name: str, din: int, dout: int, scale: float = 1.0):
        self.store.param(f"{name}/w", (din, dout), fan_in=din, scale=scale)
        self.store.zeros(f"{name}/b", (dout,))

    def _ln(self, name: str, dim: int):
        if f"{name}/g" not in self.store:
            self.store._params[f"{name}/g"] = Tensor(
                np.ones(dim, dtype=self.store.dtype), requires_grad=True
            )
        self.store.zeros(f"{name}/b", (dim,))

    def _build(self) -> None:
        c = self.config
        self._lin("node/embed", self.FEATURE_DIM, c.node_dim)
        for l in range(c.node_layers):
            for proj in ("q", "k", "v", "o"):
                self._lin(f"node/l{l}/{proj}", c.node_dim, c.node_dim)
            self._ln(f"node/l{l}/ln", c.node_dim)
        self._lin("coop/embed", self.COOP_FEATURES, c.coop_dim)
        if c.coop_encoder == "mlp":
            self._lin("coop/mlp/fc", c.coop_dim, c.coop_dim)
        else:
            for l in range(c.coop_layers):
                for proj in ("q", "k", "v", "o"):
                    self._lin(f"coop/l{l}/{proj}", c.coop_dim, c.coop_dim)
                self._ln(f"coop/l{l}/ln", c.coop_dim)
        self._lin("coop/out", c.coop_dim, c.node_dim)
        for l in range(c.gen_layers):
            if c.generator == "mlp":
                break
            for proj in ("q", "k", "v", "o"):
                self._lin(f"gen/l{l}/self/{proj}", c.node_dim, c.node_dim)
            self._ln(f"gen/l{l}/ln1", c.node_dim)
            if c.generator == "mhca":
                for proj in ("q", "k", "v", "o"):
                    self._lin(f"gen/l{l}/cross/{proj}", c.node_dim, c.node_dim)
                self._ln(f"gen/l{l}/ln2", c.node_dim)
        if c.generator != "mlp":
            for proj in ("q", "k", "v", "o"):
                self._lin(f"gen/masked/{proj}", c.node_dim, c.node_dim)
            self._ln("gen/masked/ln", c.node_dim)
        self._lin("gen/head/fc1", c.node_dim, c.head_hidden)
        self._lin("gen/head/fc2", c.head_hidden, 1, scale=c.head_scale)
        self._lin("value/fc1", 2 * c.node_dim, c.value_hidden)
        self._lin("value/fc2", c.value_hidden, 1)

    def __getitem__(self, name: str) -> Tensor:
        return self.store[name]

    def lin(self, x: Tensor, name: str) -> Tensor:
        return linear(x, self.store[f"{name}/w"], self.store[f"{name}/b"])

    def ln(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.store[f"{name}/g"], self.store[f"{name}/b"])


@dataclass
class PolicyObservation:
    """Reduced per-state view: unfinished tasks only, both arms aligned."""

    nodes1: NDArray[np.float64]   # (m+2, 26), arm1 ordering
    nodes2: NDArray[np.float64]   # (m+2, 26), arm2 ordering
    coop: NDArray[np.float64]     # (m+1, m+1, 3), arm1-aligned [move, transfer, feasible]
    joint_mask: NDArray[np.bool_]  # (m+1, m+1), arm1 rows x arm2 cols
    task_map: list[int]            # reduced slot -> original task index
    n_full: int

    @property
    def m(self) -> int:
        return len(self.task_map)

    def to_env_action(self, i: int, j: int) -> JointAction:
        ret_full = return_index(self.n_full)
        a1 = self.task_map[i] if i < self.m else ret_full
        a2 = self.task_map[j] if j < self.m else ret_full
        return JointAction(a1, a2)


def build_observation(graph: TaskStateGraph, matrix: CooperativeCostMatrix) -> PolicyObservation:
    """Reduce the full state + cost matrix to unfinished tasks and depots."""
    nodes1, task_map = observation_features(graph, Arm.ARM1)
    nodes2, _ = observation_features(graph, Arm.ARM2)
    keep = task_map + [return_index(graph.n)]
    idx = np.asarray(keep, dtype=np.intp)
    coop = matrix.features()[np.ix_(idx, idx)]
    mask = matrix.feasible[np.ix_(idx, idx)]
    return PolicyObservation(
        nodes1=nodes1,
        nodes2=nodes2,
        coop=coop,
        joint_mask=mask,
        task_map=task_map,
        n_full=graph.n,
    )


@dataclass
class BatchObservation:
    nodes1: NDArray[np.float64]   # (B, m+2, 26)
    nodes2: NDArray[np.float64]
    coop: NDArray[np.float64]     # (B, m+1, m+1, 3)
    joint_mask: NDArray[np.bool_]  # (B, m+1, m+1)
    items: list[PolicyObservation] = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.nodes1.shape[0]


def collate(observations: list[PolicyObservation]) -> BatchObservation:
    """Stack same-shape observations (episodes advance in lockstep)."""
    return BatchObservation(
        nodes1=np.stack([o.nodes1 for o in observations]),
        nodes2=np.stack([o.nodes2 for o in observations]),
        coop=np.stack([o.coop for o in observations]),
        joint_mask=np.stack([o.joint_mask for o in observations]),
        items=list(observations),
    )


def encode_nodes(params: PolicyParams, nodes) -> Tensor:
    """Node encoder: embed + SiLU, then post-norm self-attention layers.

    ``nodes`` is (B, T, 26); returns (B, T, node_dim).
    """
    c = params.config
    x = silu(params.lin(Tensor(np.asarray(nodes)) if not isinstance(nodes, Tensor) else nodes,
                        "node/embed"))
    for l in range(c.node_layers):
        q = params.lin(x, f"node/l{l}/q")
        k = params.lin(x, f"node/l{l}/k")
        v = params.lin(x, f"node/l{l}/v")
        att = multi_head_attention(q, k, v, c.heads)
        x = params.ln(x + params.lin(att, f"node/l{l}/o"), f"node/l{l}/ln")
    return x


def _coop_union_mask(m1: int) -> NDArray[np.bool_]:
    """Key mask for the fused row+column attention, shape (m1, 1, 1, 2*m1).

    Keys 0..m1-1 are the row cells (always allowed, the cell itself arrives
    through its row), keys m1..2*m1-1 are the column cells with the cell's own
    row excluded so the union counts it exactly once.
    """
    mask = np.ones((m1, 1, 1, 2 * m1), dtype=bool)
    for r in range(m1):
        mask[r, 0, 0, m1 + r] = False
    return mask


def encode_coop(params: PolicyParams, coop) -> Tensor:
    """Grid encoder: each cell attends over its row and column, twice.

    ``coop`` is (B, m1, m1, 3); returns (B, m1, m1, node_dim). Exactly
    transpose-equivariant: encode_coop(C.T) == encode_coop(C).T because row
    and column branches share projections and the union softmax sees the same
    key multiset either way. The ablation variants keep that property: "mlp"
    is pointwise and "full" attends over the whole cell set, which is
    permutation-equivariant.
    """
    c = params.config
    h = silu(params.lin(Tensor(np.asarray(coop)) if not isinstance(coop, Tensor) else coop,
                        "coop/embed"))
    B, R, C_, _ = h.shape
    if c.coop_encoder == "mlp":
        h = silu(params.lin(h, "coop/mlp/fc"))
        return params.lin(h, "coop/out")
    if c.coop_encoder == "full":
        flat = h.reshape(B, R * C_, c.coop_dim)
        for l in range(c.coop_layers):
            q = params.lin(flat, f"coop/l{l}/q")
            k = params.lin(flat, f"coop/l{l}/k")
            v = params.lin(flat, f"coop/l{l}/v")
            att = multi_head_attention(q, k, v, c.heads)
            flat = params.ln(flat + params.lin(att, f"coop/l{l}/o"), f"coop/l{l}/ln")
        return params.lin(flat.reshape(B, R, C_, c.coop_dim), "coop/out")
    m1 = R
    H = c.heads
    dh = c.coop_dim // H
    scale = 1.0 / np.sqrt(dh)
    union_mask = _coop_union_mask(m1)[None]  # (1, m1, 1, 1, 2*m1)
    for l in range(c.coop_layers):
        q = params.lin(h, f"coop/l{l}/q").reshape(B, R, C_, H, dh)
        k = params.lin(h, f"coop/l{l}/k").reshape(B, R, C_, H, dh)
        v = params.lin(h, f"coop/l{l}/v").reshape(B, R, C_, H, dh)
        row_scores = einsum("brchd,brkhd->brchk", q, k) * scale
        col_scores = einsum("brchd,bkchd->brchk", q, k) * scale
        scores = concat([row_scores, col_scores], axis=-1)
        attn = masked_softmax(scores, union_mask, axis=-1)
        w_row = attn[:, :, :, :, :m1]
        w_col = attn[:, :, :, :, m1:]
        mixed = einsum("brchk,brkhd->brchd", w_row, v) + einsum(
            "brchk,bkchd->brchd", w_col, v
        )
        out = params.lin(mixed.reshape(B, R, C_, c.coop_dim), f"coop/l{l}/o")
        h = params.ln(h + out, f"coop/l{l}/ln")
    return params.lin(h, "coop/out")


def generate_action_probs(
    params: PolicyParams,
    node_feats: Tensor,
    coop_feats: Tensor,
    joint_mask: NDArray[np.bool_],
) -> tuple[Tensor, Tensor]:
    """Per-arm action scores from that arm's aligned views.

    ``node_feats`` is (B, m+2, D) with the arm's own depot at slot m and the
    opposing depot last; ``coop_feats`` is (B, m1, m1, D) with rows = this
    arm's actions; ``joint_mask`` is (B, m1, m1) likewise aligned. Returns
    (logits, probs), each (B, m1). An action is selectable when at least one
    joint completion of it is feasible.
    """
    c = params.config
    B = node_feats.shape[0]
    m1 = coop_feats.shape[1]
    x = node_feats[:, :m1]  # drop the opposing depot slot
    H = c.heads
    dh = c.node_dim // H
    scale = 1.0 / np.sqrt(dh)
    row_any = np.asarray(joint_mask).any(axis=2)  # (B, m1)
    if c.generator != "mlp":
        for l in range(c.gen_layers):
            q = params.lin(x, f"gen/l{l}/self/q")
            k = params.lin(x, f"gen/l{l}/self/k")
            v = params.lin(x, f"gen/l{l}/self/v")
            att = multi_head_attention(q, k, v, H)
            x = params.ln(x + params.lin(att, f"gen/l{l}/self/o"), f"gen/l{l}/ln1")
            if c.generator != "mhca":
                continue
            # cross attention restricted to the node's own grid row
            qc = params.lin(x, f"gen/l{l}/cross/q").reshape(B, m1, H, dh)
            kc = params.lin(coop_feats, f"gen/l{l}/cross/k").reshape(B, m1, m1, H, dh)
            vc = params.lin(coop_feats, f"gen/l{l}/cross/v").reshape(B, m1, m1, H, dh)
            cross_scores = einsum("bihd,bikhd->bihk", qc, kc) * scale
            cross = masked_softmax(cross_scores, None, axis=-1)
            mixed = einsum("bihk,bikhd->bihd", cross, vc).reshape(B, m1, c.node_dim)
            x = params.ln(x + params.lin(mixed, f"gen/l{l}/cross/o"), f"gen/l{l}/ln2")
        # self-attention over the still-available actions only
        q = params.lin(x, "gen/masked/q")
        k = params.lin(x, "gen/masked/k")
        v = params.lin(x, "gen/masked/v")
        att = multi_head_attention(q, k, v, H, mask=row_any[:, None, :])
        x = params.ln(x + params.lin(att, "gen/masked/o"), "gen/masked/ln")
    hidden = silu(params.lin(x, "gen/head/fc1"))
    logits = params.lin(hidden, "gen/head/fc2").reshape(B, m1)
    probs = masked_softmax(logits, row_any, axis=-1)
    return logits, probs


def joint_probability_map(probs1: Tensor, probs2: Tensor, joint_mask) -> Tensor:
    """Outer product of the per-arm distributions, masked and renormalized."""
    mask = np.asarray(joint_mask, dtype=float)
    B, m1 = probs1.shape
    outer = probs1.reshape(B, m1, 1) * probs2.reshape(B, 1, m1)
    masked = outer * Tensor(mask)
    z = masked.sum(axis=(1, 2), keepdims=True)
    return masked / z


def value_estimate(params: PolicyParams, enc1: Tensor, enc2: Tensor) -> Tensor:
    """State value from both arms' mean-pooled node encodings; (B,) tensor."""
    pooled = concat([enc1.mean(axis=1), enc2.mean(axis=1)], axis=-1)
    hidden = silu(params.lin(pooled, "value/fc1"))
    return params.lin(hidden, "value/fc2").reshape(pooled.shape[0])


@dataclass
class ActionDistribution:
    probs1: Tensor
    probs2: Tensor
    joint: Tensor                 # (B, m1, m1) masked + renormalized
    joint_mask: NDArray[np.bool_]

    def log_prob(self, rows: NDArray[np.intp], cols: NDArray[np.intp]) -> Tensor:
        b = np.arange(self.joint.shape[0])
        return self.joint[(b, rows, cols)].log()

    def entropy(self) -> Tensor:
        p = self.joint
        safe = p + 1e-12
        return -(p * safe.log()).sum(axis=(1, 2))


def policy_forward(
    params: PolicyParams, batch: BatchObservation, need_value: bool = True
) -> tuple[ActionDistribution, Tensor | None]:
    """Full shared-parameter forward pass for a lockstep batch.

    The grid is encoded once from arm1's side; arm2 consumes its transpose.
    """
    enc1 = encode_nodes(params, batch.nodes1)
    enc2 = encode_nodes(params, batch.nodes2)
    coop1 = encode_coop(params, batch.coop)
    coop2 = coop1.transpose(0, 2, 1, 3)
    _, p1 = generate_action_probs(params, enc1, coop1, batch.joint_mask)
    _, p2 = generate_action_probs(
        params, enc2, coop2, np.swapaxes(batch.joint_mask, 1, 2)
    )
    joint = joint_probability_map(p1, p2, batch.joint_mask)
    dist = ActionDistribution(probs1=p1, probs2=p2, joint=joint, joint_mask=batch.joint_mask)
    value = value_estimate(params, enc1, enc2) if need_value else None
    return dist, value


def select_action(
    joint_probs: NDArray[np.float64],
    mode: SelectMode = SelectMode.ARGMAX,
    rng: np.random.Generator | None = None,
) -> tuple[int, int]:
    """Pick a cell from one joint map; argmax ties break row-major."""
    p = np.asarray(joint_probs, dtype=np.float64)
    m1 = p.shape[-1]
    flat = p.reshape(-1)
    if mode is SelectMode.ARGMAX:
        idx = int(np.argmax(flat))
    else:
        if rng is None:
            raise ValueError("sampling needs an rng")
        flat = flat / flat.sum()
        idx = int(rng.choice(flat.size, p=flat))
    return idx // m1, idx % m1


# -- inference fast path -----------------------------------------------------


class FastPolicy:
    """Tape-free mirror of the policy forward pass for planning.

    Weights are snapshotted (optionally in float32) and the coop-to-node
    adapter is folded into the cross-attention key/value projections, so the
    128-wide grid features are never materialized. Matches policy_forward's
    probabilities; a test pins the two paths together.
    """

    def __init__(self, params: PolicyParams, dtype=np.float32):
        if params.config.coop_encoder != "row_col" or params.config.generator != "mhca":
            raise ValueError("fast path supports only the default architecture")
        self.config = params.config
        self.dtype = np.dtype(dtype)
        w: dict[str, np.ndarray] = {}
        for name, t in params.store.items():
            w[name] = t.data.astype(self.dtype)
        c = self.config
        # fold the adapter into each cross K/V: h @ A @ W == h @ (A W)
        A, a_b = w["coop/out/w"], w["coop/out/b"]
        for l in range(c.gen_layers):
            for proj in ("k", "v"):
                W = w[f"gen/l{l}/cross/{proj}/w"]
                bb = w[f"gen/l{l}/cross/{proj}/b"]
                w[f"gen/l{l}/cross/{proj}/w"] = A @ W
                w[f"gen/l{l}/cross/{proj}/b"] = a_b @ W + bb
        self.w = w

    # small numpy helpers ---------------------------------------------------

    def _lin(self, x, name):
        return x @ self.w[f"{name}/w"] + self.w[f"{name}/b"]

    def _ln(self, x, name):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        xhat = (x - mu) / np.sqrt(var + 1e-5)
        return xhat * self.w[f"{name}/g"] + self.w[f"{name}/b"]

    @staticmethod
    def _silu(x):
        pos = x >= 0
        sig = np.empty_like(x)
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ez = np.exp(x[~pos])
        sig[~pos] = ez / (1.0 + ez)
        return x * sig

    @staticmethod
    def _softmax(x, mask=None):
        if mask is not None:
            x = np.where(mask, x, x - 1e9)
        x = x - x.max(axis=-1, keepdims=True)
        e = np.exp(x)
        if mask is not None:
            e = np.where(mask, e, 0.0)
        return e / e.sum(axis=-1, keepdims=True)

    def _mhsa(self, x, prefix, mask=None):
        c = self.config
        H = c.heads
        B, T, D = x.shape
        dh = D // H
        q = self._lin(x, f"{prefix}/q").reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = self._lin(x, f"{prefix}/k").reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = self._lin(x, f"{prefix}/v").reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        attn = self._softmax(scores, None if mask is None else np.broadcast_to(
            mask[:, None, None, :], scores.shape))
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        return self._lin(out, f"{prefix}/o")

    def _encode_nodes(self, nodes):
        c = self.config
        x = self._silu(self._lin(nodes.astype(self.dtype), "node/embed"))
        for l in range(c.node_layers):
            x = self._ln(x + self._mhsa(x, f"node/l{l}"), f"node/l{l}/ln")
        return x

    def _encode_coop(self, coop):
        """Row/column union attention at the internal width; no adapter."""
        c = self.config
        h = self._silu(self._lin(coop.astype(self.dtype), "coop/embed"))
        B, R, C_, _ = h.shape
        m1 = R
        H = c.heads
        dh = c.coop_dim // H
        scale = 1.0 / np.sqrt(dh)
        col_block = np.ones((m1, 1, 1, m1), dtype=bool)
        for r in range(m1):
            col_block[r, 0, 0, r] = False
        for l in range(c.coop_layers):
            q = self._lin(h, f"coop/l{l}/q").reshape(B, R, C_, H, dh)
            k = self._lin(h, f"coop/l{l}/k").reshape(B, R, C_, H, dh)
            v = self._lin(h, f"coop/l{l}/v").reshape(B, R, C_, H, dh)
            row_scores = np.einsum("brchd,brkhd->brchk", q, k, optimize=True) * scale
            col_scores = np.einsum("brchd,bkchd->brchk", q, k, optimize=True) * scale
            scores = np.concatenate([row_scores, col_scores], axis=-1)
            mask = np.concatenate(
                [np.ones((m1, 1, 1, m1), dtype=bool), col_block], axis=-1
            )[None]
            attn = self._softmax(scores, np.broadcast_to(mask, scores.shape))
            mixed = np.einsum("brchk,brkhd->brchd", attn[..., :m1], v, optimize=True)
            mixed += np.einsum("brchk,bkchd->brchd", attn[..., m1:], v, optimize=True)
            out = self._lin(mixed.reshape(B, R, C_, c.coop_dim), f"coop/l{l}/o")
            h = self._ln(h + out, f"coop/l{l}/ln")
        return h

    def _generate(self, x_nodes, coop_small, joint_mask):
        c = self.config
        B, _, _ = x_nodes.shape
        m1 = coop_small.shape[1]
        x = x_nodes[:, :m1]
        H = c.heads
        dh = c.node_dim // H
        scale = 1.0 / np.sqrt(dh)
        row_any = joint_mask.any(axis=2)
        for l in range(c.gen_layers):
            x = self._ln(x + self._mhsa(x, f"gen/l{l}/self"), f"gen/l{l}/ln1")
            qc = self._lin(x, f"gen/l{l}/cross/q").reshape(B, m1, H, dh)
            kc = self._lin(coop_small, f"gen/l{l}/cross/k").reshape(B, m1, m1, H, dh)
            vc = self._lin(coop_small, f"gen/l{l}/cross/v").reshape(B, m1, m1, H, dh)
            sc = np.einsum("bihd,bikhd->bihk", qc, kc, optimize=True) * scale
            attn = self._softmax(sc)
            mixed = np.einsum("bihk,bikhd->bihd", attn, vc, optimize=True)
            x = self._ln(
                x + self._lin(mixed.reshape(B, m1, c.node_dim), f"gen/l{l}/cross/o"),
                f"gen/l{l}/ln2",
            )
        x = self._ln(x + self._mhsa(x, "gen/masked", mask=row_any), "gen/masked/ln")
        hidden = self._silu(self._lin(x, "gen/head/fc1"))
        logits = self._lin(hidden, "gen/head/fc2").reshape(B, m1)
        return self._softmax(logits, row_any)

    def action_probs(self, batch: BatchObservation):
        """(p1, p2, joint) numpy maps for a lockstep batch."""
        enc1 = self._encode_nodes(batch.nodes1)
        enc2 = self._encode_nodes(batch.nodes2)
        coop1 = self._encode_coop(batch.coop)
        coop2 = coop1.transpose(0, 2, 1, 3)
        mask = batch.joint_mask
        p1 = self._generate(enc1, coop1, mask)
        p2 = self._generate(enc2, coop2, np.swapaxes(mask, 1, 2))
        joint = p1[:, :, None] * p2[:, None, :] * mask
        z = joint.sum(axis=(1, 2), keepdims=True)
        return p1, p2, joint / z

    def joint_map(self, obs: PolicyObservation) -> NDArray:
        return self.action_probs(collate([obs]))[2][0]
