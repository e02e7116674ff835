import numpy as np
import pytest

from coopmtsp.core import JointAction, build_state_graph
from coopmtsp.costmodel import CostOracle, KinematicParams, build_cost_matrix
from coopmtsp.nn import AllMasked, Tensor, backward, grad_check, load_checkpoint, save_checkpoint
from coopmtsp.policy import (
    ActionDistribution,
    BatchObservation,
    FastPolicy,
    PolicyConfig,
    PolicyParams,
    SelectMode,
    build_observation,
    collate,
    encode_coop,
    encode_nodes,
    generate_action_probs,
    joint_probability_map,
    policy_forward,
    select_action,
    value_estimate,
)

from _reference import fixture_f1, make_task, random_tasks

P = KinematicParams()
TINY = PolicyConfig(
    node_dim=16, coop_dim=8, heads=2, node_layers=1, coop_layers=1, gen_layers=1,
    head_hidden=16, value_hidden=16,
)


def obs_for(graph):
    return build_observation(graph, build_cost_matrix(graph, P))


def random_graph(seed, n=4):
    rng = np.random.default_rng(seed)
    g = build_state_graph(random_tasks(rng, n))
    return g


def test_observation_reduction():
    g = fixture_f1()
    obs = obs_for(g)
    assert obs.nodes1.shape == (4, 26)
    assert obs.coop.shape == (3, 3, 3)
    assert obs.joint_mask.shape == (3, 3)
    assert obs.task_map == [0, 1]
    M = build_cost_matrix(g, P)
    assert obs.coop[0, 1, 0] == pytest.approx(M.move[0, 1])
    assert obs.coop[0, 1, 2] == 1.0
    # env translation: last slot is the return action
    act = obs.to_env_action(0, 2)
    assert act == JointAction(0, 2)
    g.done[0] = True
    obs2 = obs_for(g)
    assert obs2.task_map == [1]
    assert obs2.coop.shape == (2, 2, 3)
    assert obs2.to_env_action(0, 1) == JointAction(1, 2)


def test_encoder_shapes():
    g = fixture_f1()
    batch = collate([obs_for(g)])
    params = PolicyParams(config=TINY, seed=0)
    enc = encode_nodes(params, batch.nodes1)
    assert enc.shape == (1, 4, 16)
    coop = encode_coop(params, batch.coop)
    assert coop.shape == (1, 3, 3, 16)
    full = PolicyParams(seed=0)
    assert encode_nodes(full, batch.nodes1).shape == (1, 4, 128)
    assert encode_coop(full, batch.coop).shape == (1, 3, 3, 128)


def test_coop_receptive_field_single_layer():
    # with one grid layer, perturbing cell (a, b) must touch exactly the
    # cells in row a or column b: 2*(m+1) - 1 = 5 cells at n = 2
    cfg = PolicyConfig(node_dim=16, coop_dim=8, heads=2, node_layers=1,
                       coop_layers=1, gen_layers=1, head_hidden=16, value_hidden=16)
    params = PolicyParams(config=cfg, seed=3)
    rng = np.random.default_rng(0)
    coop = rng.normal(size=(1, 3, 3, 3))
    base = encode_coop(params, coop).data
    a, b = 1, 2
    bumped = coop.copy()
    bumped[0, a, b] += 0.25
    out = encode_coop(params, bumped).data
    changed = np.abs(out - base).max(axis=-1)[0] > 1e-12
    expect = np.zeros((3, 3), dtype=bool)
    expect[a, :] = True
    expect[:, b] = True
    assert np.array_equal(changed, expect)
    assert changed.sum() == 5


def test_coop_transpose_equivariance_exact():
    params = PolicyParams(seed=1)
    rng = np.random.default_rng(4)
    coop = rng.normal(size=(2, 5, 5, 3))
    C = encode_coop(params, coop).data
    CT = encode_coop(params, np.swapaxes(coop, 1, 2)).data
    assert np.abs(CT - np.swapaxes(C, 1, 2)).max() < 1e-12


def test_joint_map_masked_and_normalized():
    for seed in range(6):
        g = random_graph(seed)
        obs = obs_for(g)
        params = PolicyParams(config=TINY, seed=2)
        dist, value = policy_forward(params, collate([obs]))
        J = dist.joint.data[0]
        assert abs(J.sum() - 1.0) < 1e-9
        assert J[~obs.joint_mask].sum() == 0.0
        assert np.all(J >= 0)
        assert value.shape == (1,)


def test_near_uniform_at_default_init():
    worst = 0.0
    for seed in range(5):
        g = random_graph(seed, n=6)
        obs = obs_for(g)
        params = PolicyParams(seed=seed)
        dist, _ = policy_forward(params, collate([obs]), need_value=False)
        J = dist.joint.data[0]
        feas = obs.joint_mask
        dev = np.abs(J[feas] - 1.0 / feas.sum()).max()
        worst = max(worst, dev)
    assert worst < 0.05, worst


def test_single_feasible_cell_gets_probability_one():
    g = fixture_f1()
    obs = obs_for(g)
    obs.joint_mask = np.zeros_like(obs.joint_mask)
    obs.joint_mask[1, 0] = True
    params = PolicyParams(config=TINY, seed=5)
    dist, _ = policy_forward(params, collate([obs]), need_value=False)
    assert dist.joint.data[0, 1, 0] == pytest.approx(1.0, abs=1e-12)


def test_deadlock_observation_raises_all_masked():
    g = fixture_f1()
    obs = obs_for(g)
    obs.joint_mask = np.zeros_like(obs.joint_mask)
    params = PolicyParams(config=TINY, seed=5)
    with pytest.raises(AllMasked):
        policy_forward(params, collate([obs]), need_value=False)


def test_agent_symmetry_under_arm_swap():
    from coopmtsp.core import DepotState, RearrangeTask

    g = random_graph(11)
    params = PolicyParams(config=TINY, seed=7)
    dist, _ = policy_forward(params, collate([obs_for(g)]), need_value=False)
    swapped = build_state_graph(
        [RearrangeTask(t.pick.copy(), t.place.copy()) for t in g.tasks],
        (
            DepotState(g.depots[1].initial.copy(), g.depots[1].current.copy()),
            DepotState(g.depots[0].initial.copy(), g.depots[0].current.copy()),
        ),
    )
    dist_s, _ = policy_forward(params, collate([obs_for(swapped)]), need_value=False)
    assert np.allclose(dist_s.probs1.data, dist.probs2.data, atol=1e-10)
    assert np.allclose(dist_s.probs2.data, dist.probs1.data, atol=1e-10)
    assert np.allclose(dist_s.joint.data[0], dist.joint.data[0].T, atol=1e-10)


def test_select_action_argmax_row_major_ties():
    J = np.zeros((3, 3))
    J[0, 2] = 0.5
    J[2, 0] = 0.5
    assert select_action(J, SelectMode.ARGMAX) == (0, 2)
    J2 = np.full((2, 2), 0.25)
    assert select_action(J2, SelectMode.ARGMAX) == (0, 0)


def test_select_action_sampling_seeded():
    J = np.array([[0.0, 0.7], [0.3, 0.0]])
    picks1 = [select_action(J, SelectMode.SAMPLE, np.random.default_rng(9)) for _ in range(5)]
    picks2 = [select_action(J, SelectMode.SAMPLE, np.random.default_rng(9)) for _ in range(5)]
    assert picks1 == picks2
    rng = np.random.default_rng(0)
    picks = [select_action(J, SelectMode.SAMPLE, rng) for _ in range(300)]
    frac = sum(1 for p in picks if p == (0, 1)) / len(picks)
    assert 0.6 < frac < 0.8
    with pytest.raises(ValueError):
        select_action(J, SelectMode.SAMPLE, None)


def test_fast_policy_matches_tape_path():
    g = random_graph(21, n=6)
    obs = obs_for(g)
    batch = collate([obs, obs])
    params = PolicyParams(seed=13)
    dist, _ = policy_forward(params, batch, need_value=False)
    exact = FastPolicy(params, dtype=np.float64)
    _, _, joint64 = exact.action_probs(batch)
    assert np.abs(joint64 - dist.joint.data).max() < 1e-12
    fast = FastPolicy(params, dtype=np.float32)
    _, _, joint32 = fast.action_probs(batch)
    assert np.abs(joint32 - dist.joint.data).max() < 1e-4
    single = exact.joint_map(obs)
    assert np.allclose(single, joint64[0], atol=1e-12)


def test_log_prob_and_entropy():
    g = random_graph(3)
    obs = obs_for(g)
    params = PolicyParams(config=TINY, seed=4)
    dist, _ = policy_forward(params, collate([obs]), need_value=False)
    rows = np.array([1])
    cols = np.array([0])
    lp = dist.log_prob(rows, cols)
    assert lp.shape == (1,)
    assert lp.data[0] == pytest.approx(np.log(dist.joint.data[0, 1, 0]))
    ent = dist.entropy().data[0]
    feas = obs.joint_mask.sum()
    assert 0.0 < ent <= np.log(feas) + 1e-6


def test_full_policy_grad_check_tiny():
    g = random_graph(17)
    obs = obs_for(g)
    batch = collate([obs])
    params = PolicyParams(config=TINY, seed=6)
    i, j = np.array([0]), np.array([1])
    if not obs.joint_mask[0, 1]:
        ii, jj = np.nonzero(obs.joint_mask)
        i, j = ii[:1], jj[:1]

    def fn():
        dist, value = policy_forward(params, batch)
        return (dist.log_prob(i, j) + 0.5 * value ** 2.0 + 0.01 * dist.entropy()).sum()

    res = grad_check(fn, params.store, max_entries=4, seed=0)
    assert res.max_rel_error < 1e-4, sorted(res.per_param.items(), key=lambda kv: -kv[1])[:5]


def test_policy_checkpoint_roundtrip(tmp_path):
    params = PolicyParams(config=TINY, seed=8)
    g = random_graph(2)
    batch = collate([obs_for(g)])
    dist, _ = policy_forward(params, batch, need_value=False)
    path = tmp_path / "policy.ckpt"
    save_checkpoint(path, params.store, extra={"config": params.config.to_dict()})
    store, extra = load_checkpoint(path)
    reparams = PolicyParams(config=PolicyConfig.from_dict(extra["config"]), store=store)
    dist2, _ = policy_forward(reparams, batch, need_value=False)
    assert np.array_equal(dist.joint.data, dist2.joint.data)


def test_generate_action_probs_uses_key_mask():
    # a fully masked-out action keeps zero probability even before the joint map
    g = fixture_f1()
    obs = obs_for(g)
    params = PolicyParams(config=TINY, seed=9)
    batch = collate([obs])
    enc = encode_nodes(params, batch.nodes1)
    coop = encode_coop(params, batch.coop)
    _, probs = generate_action_probs(params, enc, coop, batch.joint_mask)
    row_any = batch.joint_mask.any(axis=2)
    assert np.all(probs.data[~row_any] == 0.0)
    assert np.allclose(probs.data.sum(axis=-1), 1.0)
