import numpy as np
import pytest

from coopmtsp.nn import (
    Adam,
    AllMasked,
    GradCheckResult,
    NoTape,
    ParameterStore,
    Tensor,
    backward,
    bce_with_logits,
    concat,
    einsum,
    grad_check,
    layer_norm,
    linear,
    load_checkpoint,
    masked_softmax,
    multi_head_attention,
    save_checkpoint,
    sigmoid,
    silu,
    smooth_l1,
    softplus,
    stack,
)


def test_basic_arithmetic_grads():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    y = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    z = ((x * y + 2.0) / (x + 4.0)).sum()
    backward(z)
    # d/dx [(xy+2)/(x+4)] = (y(x+4) - (xy+2)) / (x+4)^2
    expect_x = (y.data * (x.data + 4) - (x.data * y.data + 2)) / (x.data + 4) ** 2
    assert np.allclose(x.grad, expect_x)
    assert np.allclose(y.grad, x.data / (x.data + 4))


def test_broadcast_unbroadcast():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    out = (x + b).sum()
    backward(out)
    assert x.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    assert np.all(b.grad == 3.0)


def test_matmul_batched_grads():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    out = (a @ w).sum()
    backward(out)
    assert a.grad.shape == (2, 3, 4)
    assert w.grad.shape == (4, 5)
    assert np.allclose(w.grad, a.data.reshape(-1, 4).T @ np.ones((6, 5)))


def test_getitem_scatter_grad():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    idx = (np.array([0, 2, 2]), np.array([1, 3, 3]))
    out = x[idx].sum()
    backward(out)
    expect = np.zeros((3, 4))
    expect[0, 1] = 1.0
    expect[2, 3] = 2.0  # repeated index accumulates
    assert np.array_equal(x.grad, expect)


def test_softmax_rows_sum_to_one_and_mask_zeros():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5, 7)))
    mask = rng.random((5, 7)) > 0.4
    mask[:, 0] = True
    p = masked_softmax(x, mask).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p[~mask] == 0.0)
    full = masked_softmax(x).data
    assert np.allclose(full.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_all_masked_raises():
    x = Tensor(np.zeros((2, 3)))
    mask = np.ones((2, 3), dtype=bool)
    mask[1] = False
    with pytest.raises(AllMasked):
        masked_softmax(x, mask)


def test_softmax_invariant_to_shift():
    x = np.array([[1.0, 2.0, 3.0]])
    a = masked_softmax(Tensor(x)).data
    b = masked_softmax(Tensor(x + 1000.0)).data
    assert np.allclose(a, b, atol=1e-12)


def test_layer_norm_moments():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(2.0, 3.0, size=(4, 6)))
    g = Tensor(np.ones(6))
    b = Tensor(np.zeros(6))
    y = layer_norm(x, g, b).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-7)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_no_tape():
    x = Tensor(np.array([1.0, 2.0]))
    with pytest.raises(NoTape):
        backward(x.sum())


def test_silu_softplus_sigmoid_values():
    x = np.array([-500.0, -1.0, 0.0, 1.0, 500.0])
    s = sigmoid(Tensor(x)).data
    assert s[0] == pytest.approx(0.0, abs=1e-12)
    assert s[2] == pytest.approx(0.5)
    assert s[4] == pytest.approx(1.0)
    sp = softplus(Tensor(x)).data
    assert sp[0] == pytest.approx(0.0, abs=1e-12)
    assert sp[4] == pytest.approx(500.0)
    assert silu(Tensor(x)).data[2] == 0.0


def test_bce_matches_manual():
    z = np.array([-2.0, 0.0, 3.0])
    y = np.array([0.0, 1.0, 1.0])
    p = 1.0 / (1.0 + np.exp(-z))
    manual = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    got = bce_with_logits(Tensor(z), y).item()
    assert got == pytest.approx(manual, abs=1e-12)


def test_smooth_l1_regions():
    pred = Tensor(np.array([0.0, 0.5, 3.0]))
    loss = smooth_l1(pred, np.zeros(3), delta=1.0, reduction="none")
    # quadratic inside delta, linear outside
    assert loss.data.shape == ()
    total = smooth_l1(pred, np.zeros(3), delta=1.0).item()
    assert total == pytest.approx((0.0 + 0.125 + 2.5) / 3)


# -- finite-difference checks per block --------------------------------------


def _check(build_fn, store, tol, **kw):
    res = grad_check(build_fn, store, **kw)
    assert isinstance(res, GradCheckResult)
    assert res.max_rel_error < tol, res.per_param
    return res


def test_grad_linear():
    store = ParameterStore(seed=0)
    w = store.param("w", (6, 4), fan_in=6)
    b = store.zeros("b", (4,))
    x = np.random.default_rng(3).normal(size=(5, 6))

    def fn():
        return (linear(Tensor(x), w, b) ** 2.0).sum()

    _check(fn, store, 1e-6)


def test_grad_layer_norm():
    store = ParameterStore(seed=1)
    g = store.param("g", (8,), fan_in=1)
    b = store.zeros("b", (8,))
    w = store.param("w", (8, 8), fan_in=8)
    x = np.random.default_rng(4).normal(size=(3, 8))

    def fn():
        h = linear(Tensor(x), w)
        return (layer_norm(h, g, b) ** 3.0).sum()

    _check(fn, store, 1e-4)


def test_grad_masked_softmax():
    store = ParameterStore(seed=2)
    w = store.param("w", (5, 5), fan_in=5)
    x = np.random.default_rng(5).normal(size=(4, 5))
    mask = np.random.default_rng(6).random((4, 5)) > 0.3
    mask[:, 2] = True
    weights = np.random.default_rng(7).normal(size=(4, 5))

    def fn():
        p = masked_softmax(linear(Tensor(x), w), mask)
        return (p * weights).sum()

    _check(fn, store, 1e-5)


def test_grad_einsum():
    store = ParameterStore(seed=3)
    a = store.param("a", (3, 4, 6), fan_in=6)
    b = store.param("b", (3, 5, 6), fan_in=6)

    def fn():
        return (einsum("rid,rjd->rij", a, b) ** 2.0).sum()

    _check(fn, store, 1e-6)


def test_einsum_rejects_unsupported():
    a = Tensor(np.ones((3, 3)))
    with pytest.raises(NotImplementedError):
        einsum("ii,ij->ij", a, a)


def test_grad_attention_stack():
    # two chained MHA layers over projected inputs: the core policy pattern
    store = ParameterStore(seed=4)
    D, H = 16, 4
    names = ["q1", "k1", "v1", "o1", "q2", "k2", "v2", "o2"]
    for nm in names:
        store.param(nm, (D, D), fan_in=D)
    g1 = store.param("g1", (D,), fan_in=1)
    b1 = store.zeros("b1", (D,))
    x = np.random.default_rng(8).normal(size=(2, 5, D))
    mask = np.ones((2, 5, 5), dtype=bool)
    mask[0, :, 4] = False

    def fn():
        h = Tensor(x)
        for layer in ("1", "2"):
            q = linear(h, store[f"q{layer}"])
            k = linear(h, store[f"k{layer}"])
            v = linear(h, store[f"v{layer}"])
            att = multi_head_attention(q, k, v, H, mask=mask)
            h = h + linear(att, store[f"o{layer}"])
        h = layer_norm(h, g1, b1)
        return (h * np.random.default_rng(9).normal(size=h.shape)).sum()

    _check(fn, store, 1e-4)


def test_grad_losses():
    store = ParameterStore(seed=5)
    w = store.param("w", (7, 3), fan_in=7)
    x = np.random.default_rng(10).normal(size=(6, 7))
    y = np.random.default_rng(11).integers(0, 2, size=(6, 3)).astype(float)
    t = np.random.default_rng(12).normal(size=(6, 3))

    def fn():
        h = linear(Tensor(x), w)
        return bce_with_logits(h, y) + smooth_l1(silu(h), t, delta=0.5) + softplus(h).mean()

    _check(fn, store, 1e-6)


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(13)
    D, H, T = 12, 3, 6
    q = rng.normal(size=(T, D))
    k = rng.normal(size=(T, D))
    v = rng.normal(size=(T, D))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), H).data
    perm = rng.permutation(T)
    out_p = multi_head_attention(Tensor(q[perm]), Tensor(k[perm]), Tensor(v[perm]), H).data
    assert np.allclose(out_p, out[perm], atol=1e-10)


def test_attention_single_key_copies_value():
    rng = np.random.default_rng(14)
    q = Tensor(rng.normal(size=(1, 4, 8)))
    k = Tensor(rng.normal(size=(1, 1, 8)))
    v = Tensor(rng.normal(size=(1, 1, 8)))
    out = multi_head_attention(q, k, v, 2).data
    assert np.allclose(out, np.broadcast_to(v.data, out.shape), atol=1e-12)


def test_parameter_store_seeded_init():
    a = ParameterStore(seed=7)
    b = ParameterStore(seed=7)
    c = ParameterStore(seed=8)
    w1 = a.param("layer/w", (32, 16), fan_in=32)
    w2 = b.param("layer/w", (32, 16), fan_in=32)
    w3 = c.param("layer/w", (32, 16), fan_in=32)
    assert np.array_equal(w1.data, w2.data)
    assert not np.array_equal(w1.data, w3.data)
    bound = 1.0 / np.sqrt(32)
    assert np.abs(w1.data).max() <= bound
    # scale shrinks the band
    w4 = a.param("head/w", (32, 16), fan_in=32, scale=0.1)
    assert np.abs(w4.data).max() <= 0.1 * bound
    # second request returns the same tensor
    assert a.param("layer/w", (32, 16)) is w1


def test_adam_minimizes_quadratic():
    store = ParameterStore(seed=9)
    x = store.param("x", (4,), fan_in=1)
    target = np.array([1.0, -2.0, 0.5, 3.0])
    opt = Adam(store, lr=0.05)
    for _ in range(400):
        opt.zero_grad()
        loss = ((x - target) ** 2.0).sum()
        backward(loss)
        opt.step()
    assert np.allclose(x.data, target, atol=1e-3)


def test_adam_bias_correction_first_step():
    store = ParameterStore(seed=10)
    x = store.zeros("x", (1,))
    opt = Adam(store, lr=0.1)
    opt.zero_grad()
    loss = (x * 3.0).sum()
    backward(loss)
    opt.step()
    # with bias correction the first step has magnitude ~lr regardless of g
    assert x.data[0] == pytest.approx(-0.1, rel=1e-6)


def test_checkpoint_roundtrip_exact(tmp_path):
    store = ParameterStore(seed=11)
    store.param("enc/w", (9, 5), fan_in=9)
    store.zeros("enc/b", (5,))
    store.param("head/w", (5, 1), fan_in=5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store, extra={"iteration": 42, "val_cost": 1.25})
    loaded, extra = load_checkpoint(path)
    assert extra == {"iteration": 42, "val_cost": 1.25}
    assert loaded.names() == store.names()
    for name in store.names():
        assert np.array_equal(loaded[name].data, store[name].data)
        assert loaded[name].data.dtype == store[name].data.dtype
    # header is one json line with a format version
    header = path.read_bytes().split(b"\n", 1)[0]
    import json

    manifest = json.loads(header)
    assert manifest["format_version"] == 1


def test_checkpoint_float32_roundtrip(tmp_path):
    store = ParameterStore(seed=12, dtype=np.float32)
    store.param("w", (3, 3), fan_in=3)
    path = tmp_path / "f32.ckpt"
    save_checkpoint(path, store)
    loaded, _ = load_checkpoint(path)
    assert loaded["w"].data.dtype == np.float32
    assert np.array_equal(loaded["w"].data, store["w"].data)


def test_checkpoint_rejects_future_format(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b'{"format_version": 99, "dtype": "f8", "params": []}\n')
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_store_astype_and_concat_stack():
    store = ParameterStore(seed=13)
    store.param("w", (4, 2), fan_in=4)
    f32 = store.astype(np.float32)
    assert f32["w"].data.dtype == np.float32
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.zeros((2, 3)), requires_grad=True)
    cat = concat([a, b], axis=1)
    assert cat.shape == (2, 6)
    st = stack([a, b], axis=0)
    backward((cat.sum() + st.sum()))
    assert np.all(a.grad == 2.0)
