import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopmtsp.core import (
    DEPOT_POSES,
    Arm,
    DepotState,
    EpisodeLog,
    EpisodeStatus,
    IncompleteLog,
    InfeasibleAction,
    JointAction,
    OddTaskCount,
    Pose,
    PoseOutOfWorkspace,
    RearrangeTask,
    SameTaskAssigned,
    StepRecord,
    TaskAlreadyDone,
    apply_joint_action,
    build_state_graph,
    cumulative_cost,
    episode_status,
    observation_features,
    return_index,
    wrap_angle,
)

from _reference import fixture_f1, make_task


class FakeCell:
    def __init__(self, feasible=True, move_time=1.0, transfer_time=2.0):
        self.feasible = feasible
        self.move_time = move_time
        self.transfer_time = transfer_time


def test_wrap_angle_range():
    assert wrap_angle(np.pi) == pytest.approx(-np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(-np.pi)
    assert wrap_angle(1.5 * np.pi) == pytest.approx(-0.5 * np.pi)
    assert wrap_angle(0.3) == pytest.approx(0.3)
    arr = wrap_angle(np.array([0.0, 2 * np.pi + 0.1, -7.0]))
    assert np.all(arr >= -np.pi) and np.all(arr < np.pi)


def test_pose_wraps_on_construction():
    p = Pose([0.1, 0.2, 0.3], [0.0, 2 * np.pi + 0.25, -np.pi])
    assert p.rpy[1] == pytest.approx(0.25)
    assert p.rpy[2] == pytest.approx(-np.pi)
    assert p.as_array().shape == (6,)
    assert np.allclose(p.as_array()[:3], [0.1, 0.2, 0.3])


def test_build_state_graph_defaults():
    g = fixture_f1()
    assert g.n == 2
    assert not g.done.any()
    assert g.returned == (False, False)
    for k in (0, 1):
        assert np.allclose(g.depots[k].initial.pos, DEPOT_POSES[k])
        assert g.depots[k].current.almost_equal(g.depots[k].initial)


def test_build_state_graph_odd_count():
    t = make_task([0.0, 0.0, 0.0], 0.0, [0.2, 0.2, 0.0], 0.0)
    with pytest.raises(OddTaskCount):
        build_state_graph([t])


def test_build_state_graph_workspace():
    bad = make_task([2.0, 0.0, 0.0], 0.0, [0.2, 0.2, 0.0], 0.0)
    good = make_task([0.0, 0.3, 0.0], 0.0, [0.3, -0.3, 0.0], 0.0)
    with pytest.raises(PoseOutOfWorkspace):
        build_state_graph([bad, good])
    high = DepotState(Pose([0.0, -0.7, 0.9], [0, 0, 0]), Pose([0.0, -0.7, 0.9], [0, 0, 0]))
    ok = DepotState(Pose([0.0, 0.7, 0.3], [0, 0, 0]), Pose([0.0, 0.7, 0.3], [0, 0, 0]))
    with pytest.raises(PoseOutOfWorkspace):
        build_state_graph([good, good], (high, ok))


def test_apply_marks_done_and_moves_arms():
    g = fixture_f1()
    g2 = apply_joint_action(g, JointAction(0, 1), FakeCell())
    assert g2.done.tolist() == [True, True]
    assert g2.depots[0].current.almost_equal(g.tasks[0].place)
    assert g2.depots[1].current.almost_equal(g.tasks[1].place)
    # purity: the input graph is untouched
    assert not g.done.any()
    assert g.depots[0].current.almost_equal(g.depots[0].initial)


def test_apply_validation_errors():
    g = fixture_f1()
    with pytest.raises(SameTaskAssigned):
        apply_joint_action(g, JointAction(0, 0), FakeCell())
    with pytest.raises(InfeasibleAction):
        apply_joint_action(g, JointAction(0, 1), FakeCell(feasible=False))
    with pytest.raises(InfeasibleAction):
        apply_joint_action(g, JointAction(0, 5), FakeCell())
    g2 = apply_joint_action(g, JointAction(0, 1), FakeCell())
    with pytest.raises(TaskAlreadyDone):
        apply_joint_action(g2, JointAction(0, 1), FakeCell())


def test_apply_return_semantics():
    g = fixture_f1()
    ret = return_index(g.n)
    # idle-style return with unfinished tasks leaves the arm in place
    g_idle = apply_joint_action(g, JointAction(0, ret), FakeCell())
    assert g_idle.done.tolist() == [True, False]
    assert g_idle.returned == (False, False)
    assert g_idle.depots[1].current.almost_equal(g.depots[1].initial)
    # joint return after completion moves both arms home and flags them
    g2 = apply_joint_action(g, JointAction(0, 1), FakeCell())
    g3 = apply_joint_action(g2, JointAction(ret, ret), FakeCell())
    assert g3.returned == (True, True)
    assert g3.depots[0].current.almost_equal(g3.depots[0].initial)


def test_episode_status():
    g = fixture_f1()
    assert episode_status(g) is EpisodeStatus.ONGOING
    empty = np.zeros((3, 3), dtype=bool)
    assert episode_status(g, empty) is EpisodeStatus.DEADLOCK
    some = empty.copy()
    some[0, 1] = True
    assert episode_status(g, some) is EpisodeStatus.ONGOING
    ret = return_index(g.n)
    g2 = apply_joint_action(g, JointAction(0, 1), FakeCell())
    g3 = apply_joint_action(g2, JointAction(ret, ret), FakeCell())
    assert episode_status(g3, empty) is EpisodeStatus.SUCCESS


def test_cumulative_cost_additivity():
    log = EpisodeLog(
        records=[
            StepRecord(JointAction(0, 1), 1.25, 2.5),
            StepRecord(JointAction(2, 3), 0.75, 1.125),
        ],
        return_time=3.5,
        status=EpisodeStatus.SUCCESS,
    )
    assert cumulative_cost(log) == pytest.approx(1.25 + 2.5 + 0.75 + 1.125 + 3.5, abs=1e-12)


def test_cumulative_cost_incomplete():
    log = EpisodeLog(records=[StepRecord(JointAction(0, 1), 1.0, 1.0)])
    with pytest.raises(IncompleteLog):
        cumulative_cost(log)
    log.status = EpisodeStatus.SUCCESS  # still missing the return leg
    with pytest.raises(IncompleteLog):
        cumulative_cost(log)


def test_observation_shape_and_order():
    g = fixture_f1()
    obs, imap = observation_features(g, Arm.ARM1)
    assert obs.shape == (4, 26)
    assert imap == [0, 1]
    # task rows carry pick then place in the absolute block
    assert np.allclose(obs[0, :6], g.tasks[0].pick.as_array())
    assert np.allclose(obs[0, 6:12], g.tasks[0].place.as_array())
    # depot flag marks exactly the two depot rows, done flag all zero
    assert obs[:, 25].tolist() == [0.0, 0.0, 1.0, 1.0]
    assert np.all(obs[:, 24] == 0.0)
    # own depot row precedes the opposing depot row
    assert np.allclose(obs[2, :3], DEPOT_POSES[0])
    assert np.allclose(obs[3, :3], DEPOT_POSES[1])
    obs2, _ = observation_features(g, Arm.ARM2)
    assert np.allclose(obs2[2, :3], DEPOT_POSES[1])
    assert np.allclose(obs2[3, :3], DEPOT_POSES[0])


def test_observation_drops_done_tasks():
    g = fixture_f1()
    g2 = apply_joint_action(g, JointAction(1, 0), FakeCell())
    obs, imap = observation_features(g2, Arm.ARM1)
    assert obs.shape == (2, 26)
    assert imap == []
    g3 = fixture_f1()
    g3.done[0] = True
    obs3, imap3 = observation_features(g3, Arm.ARM2)
    assert obs3.shape == (3, 26)
    assert imap3 == [1]


def test_observation_relative_block():
    g = fixture_f1()
    g.depots[0].current = Pose([0.2, -0.1, 0.05], [0, 0, 3.0])
    obs, _ = observation_features(g, Arm.ARM1)
    ee = g.depots[0].current
    # relative positions are plain differences
    assert np.allclose(obs[0, 12:15], g.tasks[0].pick.pos - ee.pos)
    assert np.allclose(obs[0, 18:21], g.tasks[0].place.pos - ee.pos)
    # relative angles are wrapped into [-pi, pi)
    rel_ang = obs[0, 15:18]
    assert np.all(rel_ang >= -np.pi) and np.all(rel_ang < np.pi)
    assert rel_ang[2] == pytest.approx(wrap_angle(g.tasks[0].pick.rpy[2] - 3.0))


@settings(max_examples=30, deadline=None)
@given(
    dx=st.floats(-0.05, 0.05),
    dy=st.floats(-0.05, 0.05),
)
def test_observation_translation(dx, dy):
    # translating the whole scene shifts absolute positions and leaves the
    # relative block untouched
    g = fixture_f1()
    obs, _ = observation_features(g, Arm.ARM1)
    shift = np.array([dx, dy, 0.0])

    def move(p: Pose) -> Pose:
        return Pose(p.pos + shift, p.rpy)

    tasks = [RearrangeTask(move(t.pick), move(t.place)) for t in g.tasks]
    depots = (
        DepotState(move(g.depots[0].initial), move(g.depots[0].current)),
        DepotState(move(g.depots[1].initial), move(g.depots[1].current)),
    )
    g2 = build_state_graph(tasks, depots)
    obs2, _ = observation_features(g2, Arm.ARM1)
    assert np.allclose(obs2[:, 12:24], obs[:, 12:24], atol=1e-12)
    for block in (0, 6):
        assert np.allclose(obs2[:, block : block + 3] - obs[:, block : block + 3], shift, atol=1e-12)
