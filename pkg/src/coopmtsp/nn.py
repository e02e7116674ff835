"""Minimal reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray and remembers how it was produced; backward() walks
the recorded graph in reverse topological order. Only the ops this package
needs exist, several of them (layer norm, masked softmax, attention, losses)
as fused primitives with hand-derived gradients.

float64 is the default parameter dtype so finite-difference gradient checks
are meaningful; float32 stores are supported for cheaper training.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "NoTape",
    "AllMasked",
    "as_tensor",
    "linear",
    "silu",
    "softplus",
    "sigmoid",
    "concat",
    "stack",
    "einsum",
    "layer_norm",
    "masked_softmax",
    "multi_head_attention",
    "bce_with_logits",
    "smooth_l1",
    "backward",
    "ParameterStore",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
    "grad_check",
    "CHECKPOINT_FORMAT_VERSION",
]

CHECKPOINT_FORMAT_VERSION = 1
MASK_FILL = -1e9


class NoTape(RuntimeError):
    """backward() called on a tensor with no recorded graph."""


class AllMasked(ValueError):
    """A softmax row had every entry masked out."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accum(self, grad: np.ndarray) -> None:
        grad = _unbroadcast(np.asarray(grad), self.data.shape)
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, parents=(self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accum(g)
                if other.requires_grad:
                    other._accum(g)
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, parents=(self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accum(g * other.data)
                if other.requires_grad:
                    other._accum(g * self.data)
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, parents=(self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accum(g / other.data)
                if other.requires_grad:
                    other._accum(-g * self.data / (other.data * other.data))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        out = Tensor(self.data ** exponent, parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * exponent * self.data ** (exponent - 1))
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data @ other.data, parents=(self, other))
        if out.requires_grad:
            def bwd(g):
                if self.requires_grad:
                    self._accum(g @ np.swapaxes(other.data, -1, -2))
                if other.requires_grad:
                    other._accum(np.swapaxes(self.data, -1, -2) @ g)
            out._backward = bwd
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], parents=(self,))
        if out.requires_grad:
            def bwd(g):
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                self._accum(full)
            out._backward = bwd
        return out

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.reshape(self.data.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g.transpose(inv))
        return out

    # -- reductions and pointwise -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,))
        if out.requires_grad:
            def bwd(g):
                if axis is None:
                    self._accum(np.broadcast_to(g, self.data.shape))
                    return
                if not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape))
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def exp(self):
        val = np.exp(self.data)
        out = Tensor(val, parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g * val)
        return out

    def log(self):
        out = Tensor(np.log(self.data), parents=(self,))
        if out.requires_grad:
            out._backward = lambda g: self._accum(g / self.data)
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out + bias if bias is not None else out


def _sigmoid_arr(z: np.ndarray) -> np.ndarray:
    pos = z >= 0
    out = np.empty_like(z)
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    val = _sigmoid_arr(x.data)
    out = Tensor(val, parents=(x,))
    if out.requires_grad:
        out._backward = lambda g: x._accum(g * val * (1.0 - val))
    return out


def silu(x: Tensor) -> Tensor:
    sig = _sigmoid_arr(x.data)
    out = Tensor(x.data * sig, parents=(x,))
    if out.requires_grad:
        out._backward = lambda g: x._accum(g * sig * (1.0 + x.data * (1.0 - sig)))
    return out


def softplus(x: Tensor) -> Tensor:
    val = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0.0)
    out = Tensor(val, parents=(x,))
    if out.requires_grad:
        out._backward = lambda g: x._accum(g * _sigmoid_arr(x.data))
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accum(piece)
        out._backward = bwd
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    if out.requires_grad:
        def bwd(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accum(np.take(g, i, axis=axis))
        out._backward = bwd
    return out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; gradients come from swapping the spec around.

    Every index of each input must appear in the output or the other input
    (no free summed indices, no repeated indices within one operand).
    """
    a = as_tensor(a)
    b = as_tensor(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for name, idx in (("first", ia), ("second", ib)):
        if len(set(idx)) != len(idx):
            raise NotImplementedError(f"repeated index in {name} operand: {spec}")
    if not (set(ia) <= set(out_idx) | set(ib)) or not (set(ib) <= set(out_idx) | set(ia)):
        raise NotImplementedError(f"free summed index unsupported: {spec}")
    out = Tensor(np.einsum(spec, a.data, b.data), parents=(a, b))
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accum(np.einsum(f"{out_idx},{ib}->{ia}", g, b.data))
            if b.requires_grad:
                b._accum(np.einsum(f"{out_idx},{ia}->{ib}", g, a.data))
        out._backward = bwd
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data, parents=(x, gamma, beta))
    if out.requires_grad:
        def bwd(g):
            if gamma.requires_grad:
                gamma._accum((g * xhat).reshape(-1, x.data.shape[-1]).sum(axis=0))
            if beta.requires_grad:
                beta._accum(g.reshape(-1, x.data.shape[-1]).sum(axis=0))
            if x.requires_grad:
                gy = g * gamma.data
                m1 = gy.mean(axis=-1, keepdims=True)
                m2 = (gy * xhat).mean(axis=-1, keepdims=True)
                x._accum(inv * (gy - m1 - xhat * m2))
        out._backward = bwd
    return out


def masked_softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with hard-zero masked entries.

    ``mask`` is boolean (True = keep), broadcastable to ``x``. Masked logits
    are pushed down additively before the exp and the resulting probabilities
    are zeroed exactly. A row with nothing to attend to raises AllMasked.
    """
    data = x.data
    if mask is not None:
        mask_arr = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not mask_arr.any(axis=axis).all():
            raise AllMasked("softmax row with every entry masked")
        data = np.where(mask_arr, data, data + MASK_FILL)
    shifted = data - data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask_arr, e, 0.0)
    probs = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(probs, parents=(x,))
    if out.requires_grad:
        def bwd(g):
            inner = (g * probs).sum(axis=axis, keepdims=True)
            x._accum(probs * (g - inner))
        out._backward = bwd
    return out


def _split_heads(t: Tensor, num_heads: int) -> Tensor:
    *lead, T, D = t.shape
    head = D // num_heads
    return t.reshape(*lead, T, num_heads, head).transpose(
        tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    )


def _merge_heads(t: Tensor) -> Tensor:
    *lead, H, T, head = t.shape
    return t.transpose(tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)).reshape(
        *lead, T, H * head
    )


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention over pre-projected q/k/v.

    Shapes [..., T, D] with D divisible by num_heads; ``mask`` broadcastable
    to [..., Tq, Tk], True where attending is allowed. Projections are the
    caller's business; this is just split, score, softmax, mix, merge.
    """
    D = q.shape[-1]
    if D % num_heads:
        raise ValueError(f"feature dim {D} not divisible by {num_heads} heads")
    qh = _split_heads(q, num_heads)
    kh = _split_heads(k, num_heads)
    vh = _split_heads(v, num_heads)
    scores = (qh @ kh.transpose(tuple(range(qh.ndim - 2)) + (qh.ndim - 1, qh.ndim - 2))) * (
        1.0 / np.sqrt(D // num_heads)
    )
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)  # head axis
    attn = masked_softmax(scores, mask, axis=-1)
    return _merge_heads(attn @ vh)


def bce_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Numerically stable binary cross entropy on raw logits."""
    y = np.asarray(targets, dtype=logits.dtype)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    scale = 1.0 / loss.size if reduction == "mean" else 1.0
    out = Tensor(loss.sum() * scale if reduction != "none" else loss, parents=(logits,))
    if out.requires_grad:
        sig = _sigmoid_arr(z)
        if reduction == "none":
            out._backward = lambda g: logits._accum(g * (sig - y))
        else:
            out._backward = lambda g: logits._accum(g * scale * (sig - y))
    return out


def smooth_l1(pred: Tensor, target, delta: float = 1.0, reduction: str = "mean") -> Tensor:
    """Huber-style loss: quadratic within ``delta``, linear outside."""
    t = np.asarray(target, dtype=pred.dtype)
    d = pred.data - t
    ad = np.abs(d)
    loss = np.where(ad < delta, 0.5 * d * d / delta, ad - 0.5 * delta)
    scale = 1.0 / loss.size if reduction == "mean" else 1.0
    out = Tensor(loss.sum() * scale, parents=(pred,))
    if out.requires_grad:
        gd = np.clip(d / delta, -1.0, 1.0)
        out._backward = lambda g: pred._accum(g * scale * gd)
    return out


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients from a scalar loss through the tape."""
    if not loss.requires_grad or loss._backward is None:
        raise NoTape("tensor has no recorded operations to differentiate")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# -- parameters -------------------------------------------------------------


class ParameterStore:
    """Named trainable tensors with seeded uniform(+-1/sqrt(fan_in)) init."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def param(self, name: str, shape: tuple, fan_in: int | None = None, scale: float = 1.0) -> Tensor:
        if name in self._params:
            return self._params[name]
        shape = tuple(int(s) for s in shape)
        if fan_in is None:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
        bound = scale / np.sqrt(float(max(1, fan_in)))
        data = self._rng(name).uniform(-bound, bound, size=shape).astype(self.dtype)
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def zeros(self, name: str, shape: tuple) -> Tensor:
        if name in self._params:
            return self._params[name]
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(k, self._params[k]) for k in self.names()]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore(seed=self.seed, dtype=dtype)
        for k, t in self._params.items():
            out._params[k] = Tensor(t.data.astype(dtype), requires_grad=True)
        return out


class Adam:
    """Adam with bias correction over every parameter in a store."""

    def __init__(self, store: ParameterStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1 ** self.t)
            vhat = v / (1.0 - self.b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def state_arrays(self) -> dict:
        return {"m": self._m, "v": self._v, "t": self.t}


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, store: ParameterStore, extra: dict | None = None) -> None:
    """One JSON manifest line, then the raw little-endian parameter bytes."""
    entries = []
    blobs = []
    offset = 0
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str.lstrip("<>=|"),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "seed": store.seed,
        "dtype": store.dtype.str.lstrip("<>=|"),
        "params": entries,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    with open(path, "rb") as f:
        header = f.readline()
        blob = f.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format: {manifest.get('format_version')}")
    store = ParameterStore(seed=manifest.get("seed", 0), dtype=np.dtype(manifest["dtype"]))
    for ent in manifest["params"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        arr = np.frombuffer(
            blob, dtype=dt, count=int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1,
            offset=ent["offset"],
        ).reshape(ent["shape"]).copy()
        store._params[ent["name"]] = Tensor(arr, requires_grad=True)
    return store, manifest.get("extra", {})


# -- gradient checking ------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def grad_check(
    fn,
    store: ParameterStore,
    eps: float = 1e-4,
    max_entries: int = 25,
    seed: int = 0,
) -> GradCheckResult:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    Per parameter, up to ``max_entries`` entries are probed and the error is
    the ratio ||analytic - numeric|| / max(1e-8, ||numeric||) over the probed
    entries (entrywise division is meaningless on exact-zero gradients).
    """
    store.zero_grad()
    loss = fn()
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in store.items()}
    rng = np.random.default_rng([seed, 0xC4EC])
    per_param = {}
    worst = 0.0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            keep = flat[i]
            flat[i] = keep + eps
            hi = fn().item()
            flat[i] = keep - eps
            lo = fn().item()
            flat[i] = keep
            num[j] = (hi - lo) / (2.0 * eps)
        ana = analytic[name].reshape(-1)[idx]
        err = float(np.linalg.norm(ana - num) / max(1e-8, np.linalg.norm(num)))
        per_param[name] = err
        worst = max(worst, err)
    return GradCheckResult(max_rel_error=worst, per_param=per_param)
