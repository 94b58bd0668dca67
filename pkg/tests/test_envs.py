import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dair.envs.planar import (
    DOOR_HALF,
    POS_SCALE,
    TABLE_HALF,
    EnvConfig,
    PlanarEnv,
    SpawnError,
    WorldState,
    reset,
)


def make_state(env, agents, objs, goals, slider=0.0):
    agents = np.asarray(agents, dtype=float)
    objs = np.asarray(objs, dtype=float).reshape(-1, 2)
    goals = np.asarray(goals, dtype=float).reshape(-1, 2)
    env.state = WorldState(
        agent_pos=agents,
        agent_vel=np.zeros_like(agents),
        obj_pos=objs,
        obj_vel=np.zeros_like(objs),
        goals=goals,
        slider=slider,
        satisfied=np.zeros(len(goals), dtype=bool),
        boxed=np.zeros(len(objs), dtype=bool),
    )
    return env.state


def door_env(**kw):
    return PlanarEnv(EnvConfig(task="push-door", **kw))


# -- reset ------------------------------------------------------------------------


def test_rearrange_entity_count(rng):
    env, state, ents = reset(EnvConfig(task="rearrange", n_objects=3), rng)
    assert len(ents) == 5
    assert sum(e.kind == "interaction-region" for e in ents) == 3


def test_adjust_bar_has_two_regions_and_goal_length(rng):
    env, state, ents = reset(EnvConfig(task="adjust-bar"), rng)
    assert sum(e.kind == "interaction-region" for e in ents) == 2
    assert np.linalg.norm(state.goals[0] - state.goals[1]) == pytest.approx(0.2, abs=1e-12)
    assert np.linalg.norm(state.obj_pos[0] - state.obj_pos[1]) == pytest.approx(0.2, abs=1e-12)
    with pytest.raises(ValueError):
        EnvConfig(task="adjust-bar", n_objects=3)


@pytest.mark.parametrize("task", ["rearrange", "push-door", "push-box"])
def test_object_goal_distance_bounded(task, rng):
    env = PlanarEnv(EnvConfig(task=task))
    for _ in range(200):
        env.reset(rng)
        d = np.linalg.norm(env.achieved_goals() - env.state.goals, axis=1)[env.goal_mask]
        assert np.all(d <= 0.4 + 1e-12)
        assert not env.success()


def test_reset_no_overlaps(rng):
    env = PlanarEnv(EnvConfig(task="rearrange", n_objects=4))
    cfg = env.cfg
    for _ in range(100):
        env.reset(rng)
        s = env.state
        for p in s.agent_pos:
            assert np.all(np.linalg.norm(s.obj_pos - p, axis=1) >= cfg.agent_radius + cfg.block_radius)
        for a in range(4):
            for b in range(a + 1, 4):
                assert np.linalg.norm(s.obj_pos[a] - s.obj_pos[b]) >= 2 * cfg.block_radius


def test_overconstrained_spawn_raises(rng):
    env = PlanarEnv(EnvConfig(task="rearrange", n_objects=8, object_spawn_radius=0.03))
    with pytest.raises(SpawnError, match="1000 tries"):
        env.reset(rng)


def test_horizon_is_fifty_per_object():
    assert door_env().cfg.horizon == 100
    assert EnvConfig(task="rearrange", n_objects=3).horizon == 150


# -- dynamics ---------------------------------------------------------------------


def test_zero_action_no_contact_is_static_and_door_decays():
    env = door_env()
    make_state(env, [[-0.3, -0.2], [0.3, -0.2]], [[-0.2, 0.1]], [[0.2, 0.0], env.door_goal], slider=0.5)
    before = env.state.copy()
    env.step(np.zeros((2, 2)))
    np.testing.assert_array_equal(env.state.obj_pos, before.obj_pos)
    assert env.state.slider == pytest.approx(0.5 - env.cfg.spring_rate)


def test_head_on_push_matches_1d_oracle():
    env = PlanarEnv(EnvConfig(task="rearrange", n_objects=1))
    cfg = env.cfg
    contact = cfg.agent_radius + cfg.block_radius
    a0, b0 = -0.1, -0.1 + contact + 0.001
    make_state(env, [[a0, 0.0], [0.3, 0.3]], [[b0, 0.0]], [[0.3, -0.2]])
    env.step([[1.0, 0.0], [0.0, 0.0]])
    agent = a0 + cfg.max_step
    expect = max(b0, agent + contact)
    assert abs(env.state.obj_pos[0, 0] - expect) < 1e-9
    assert env.state.obj_pos[0, 1] == 0.0
    assert env.state.agent_pos[0, 0] == pytest.approx(agent, abs=1e-15)


@pytest.mark.parametrize("dy", [0.01, -0.02, 0.03])
def test_oblique_push_projects_along_contact_normal(dy):
    env = PlanarEnv(EnvConfig(task="rearrange", n_objects=1))
    cfg = env.cfg
    contact = cfg.agent_radius + cfg.block_radius
    b = np.array([0.0, dy])
    a_old = np.array([-0.04, 0.0])
    make_state(env, [a_old, [0.3, 0.3]], [b], [[0.3, -0.2]])
    env.step([[0.5, 0.0], [0.0, 0.0]])
    a_new = a_old + np.array([0.5 * cfg.max_step, 0.0])
    gap = math.hypot(*(b - a_new))
    if gap >= contact:
        expect = b
    else:
        n = (b - a_new) / gap
        expect = a_new + contact * n
    assert np.max(np.abs(env.state.obj_pos[0] - expect)) < 1e-9


def test_untouched_objects_do_not_move():
    env = PlanarEnv(EnvConfig(task="rearrange", n_objects=2))
    make_state(env, [[-0.1, 0.0], [0.3, 0.3]], [[-0.054, 0.0], [0.2, -0.2]], [[0.3, -0.2], [0.0, 0.3]])
    env.step([[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(env.state.obj_pos[1], [0.2, -0.2])
    assert env.state.obj_pos[0, 0] > -0.054


def test_non_finite_action():
    env = door_env()
    env.reset(np.random.default_rng(0))
    with pytest.raises(ValueError, match="non-finite"):
        env.step([[np.nan, 0.0], [0.0, 0.0]])


def test_holding_handle_opens_door():
    env = door_env()
    make_state(env, [[0.0, DOOR_HALF], [0.3, -0.2]], [[-0.2, 0.0]], [[0.2, 0.0], env.door_goal])
    for _ in range(10):
        handle = env.handle_pos(env.state.slider)
        a = np.clip((handle - env.state.agent_pos[0]) / env.cfg.max_step, -1, 1)
        env.step([a, [0.0, 0.0]])
    assert env.state.slider == 1.0
    # let go: decays by the spring rate, monotonically
    seq = []
    for _ in range(5):
        env.step([[-1.0, -1.0], [0.0, 0.0]])
        seq.append(env.state.slider)
    assert all(b <= a for a, b in zip([1.0] + seq, seq))
    assert seq[-1] <= 1.0 - 4 * env.cfg.spring_rate + 1e-12


def test_closed_door_blocks_and_open_door_passes():
    env = door_env()
    band = 0.01 + env.cfg.block_radius
    for slider, passes in ((0.0, False), (1.0, True)):
        holder = [0.0, DOOR_HALF + 0.16 * slider] if passes else [0.3, -0.3]
        make_state(env, [[-band - 0.05, -0.04], holder], [[-band - 0.001, -0.04]], [[0.2, 0.0], env.door_goal], slider)
        for _ in range(6):
            env.step([[1.0, 0.0], [0.0, 0.0]])
        assert (env.state.obj_pos[0, 0] > band) == passes


def test_push_box_latches_block():
    env = PlanarEnv(EnvConfig(task="push-box"))
    band = 0.01 + env.cfg.block_radius
    make_state(env, [[0.3, 0.0], [-0.3, -0.3]], [[band + 0.01, 0.0]], [[0.1, 0.0], env.door_goal], slider=0.0)
    env.state.boxed[0] = True
    env.state.agent_pos[0] = [band + 0.01 + 0.046, 0.0]
    for _ in range(5):
        env.step([[-1.0, 0.0], [0.0, 0.0]])
    assert env.state.obj_pos[0, 0] >= band


def test_bar_moves_only_when_both_ends_held():
    env = PlanarEnv(EnvConfig(task="adjust-bar"))
    ends = np.array([[-0.1, 0.0], [0.1, 0.0]])
    make_state(env, [[-0.1, 0.01], [0.3, 0.3]], ends, [[-0.1, 0.2], [0.1, 0.2]])
    env.step([[0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(env.state.obj_pos, ends)
    make_state(env, [[-0.1, 0.01], [0.1, -0.01]], ends, [[-0.1, 0.2], [0.1, 0.2]])
    env.step([[0.0, 1.0], [0.0, 1.0]])
    np.testing.assert_allclose(env.state.obj_pos, ends + [0.0, 0.03], atol=1e-12)
    env.step([[0.0, 1.0], [0.0, -1.0]])  # twist: length restored
    assert np.linalg.norm(env.state.obj_pos[1] - env.state.obj_pos[0]) == pytest.approx(0.2, abs=1e-12)


def test_determinism():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(5)
        env = door_env()
        env.reset(rng)
        traj = []
        for _ in range(50):
            o, r, d, _ = env.step(rng.uniform(-1, 1, size=(2, 2)))
            traj.append((o.agents.tobytes(), o.regions.tobytes(), r))
        outs.append(traj)
    assert outs[0] == outs[1]


@settings(max_examples=25, deadline=None)
@given(task=st.sampled_from(["rearrange", "push-door", "push-box", "adjust-bar"]), seed=st.integers(0, 10_000))
def test_containment_and_observation_consistency(task, seed):
    rng = np.random.default_rng(seed)
    env = PlanarEnv(EnvConfig(task=task))
    obs = env.reset(rng)
    cfg = env.cfg
    for _ in range(60):
        # drive agents toward the nearest object to create contacts
        s = env.state
        tgt = env.achieved_goals()[rng.integers(0, cfg.n_objects)]
        a = np.clip((tgt - s.agent_pos) / cfg.max_step + rng.normal(size=(2, 2)), -1, 1)
        obs, _, done, _ = env.step(a)
        s = env.state
        assert np.all(np.abs(s.agent_pos) <= np.array(TABLE_HALF) + 1e-12)
        assert np.all(np.abs(s.obj_pos) <= np.array(TABLE_HALF) + 1e-12)
        assert 0.0 <= s.slider <= 1.0
        # recompute features from the world state
        np.testing.assert_array_equal(obs.agents[:, :2], s.agent_pos / POS_SCALE)
        np.testing.assert_array_equal(obs.agents[:, 2:], s.agent_vel / cfg.max_step)
        np.testing.assert_array_equal(obs.regions[:, :2], env.achieved_goals() / POS_SCALE)
        np.testing.assert_array_equal(obs.regions[:, 4:], s.goals / POS_SCALE)
        if done:
            break


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_door_non_increasing_without_handle_contact(seed):
    rng = np.random.default_rng(seed)
    env = door_env()
    env.reset(rng)
    env.state.slider = rng.uniform()
    for _ in range(30):
        before = env.state.slider
        h = env.handle_pos(before)
        a = rng.uniform(-1, 1, size=(2, 2))
        nxt = env.state.agent_pos + a * env.cfg.max_step
        env.step(a)
        if np.all(np.linalg.norm(nxt - h, axis=1) >= env.cfg.handle_radius):
            assert env.state.slider <= before


# -- reward and success -----------------------------------------------------------


def test_sparse_reward_when_all_on_goal():
    env = PlanarEnv(EnvConfig(task="rearrange", n_objects=2))
    g = np.array([[0.1, 0.1], [-0.1, 0.2]])
    assert env.compute_reward(g, g) == 1.0
    assert env.compute_reward(g + [0.06, 0], g) == 0.0


def test_door_open_block_away_rewards():
    for mode, expect in (("informative", 1.0), ("sparse", 0.0)):
        env = door_env(reward_mode=mode)
        make_state(env, [[0.0, DOOR_HALF + 0.16 * 0.85], [0.3, -0.3]], [[-0.2, 0.0]], [[0.2, 0.0], env.door_goal], slider=0.85)
        _, r, _, _ = env.step([[0.0, 0.0], [0.0, 0.0]])
        assert env.state.slider >= 0.9
        assert r == expect
        # informative sub-goals are paid once
        _, r2, _, _ = env.step([[0.0, 0.0], [0.0, 0.0]])
        assert r2 == 0.0


def test_no_subgoal_no_reward():
    for mode in ("sparse", "informative"):
        env = door_env(reward_mode=mode)
        make_state(env, [[-0.3, -0.3], [0.3, -0.3]], [[-0.2, 0.0]], [[0.2, 0.0], env.door_goal])
        assert env.step(np.zeros((2, 2)))[1] == 0.0


def test_collision_penalty():
    env = door_env(collision_penalty=True)
    make_state(env, [[-0.3, -0.3], [-0.27, -0.3]], [[-0.2, 0.1]], [[0.2, 0.0], env.door_goal])
    _, r, _, info = env.step(np.zeros((2, 2)))
    assert info["gripper_distance"] < env.cfg.collision_distance
    assert r == -1.0
    env2 = door_env()
    make_state(env2, [[-0.3, -0.3], [-0.27, -0.3]], [[-0.2, 0.1]], [[0.2, 0.0], env2.door_goal])
    assert env2.step(np.zeros((2, 2)))[1] == 0.0


def test_success_radius_boundary():
    env = PlanarEnv(EnvConfig(task="rearrange", n_objects=1))
    g = np.array([[0.1, 0.1]])
    assert env.success_from_goals(g, g)
    assert not env.success_from_goals(g + [0.05 + 1e-9, 0], g)


def test_bar_swapped_ends():
    ends = np.array([[-0.1, 0.0], [0.1, 0.0]])
    fixed = PlanarEnv(EnvConfig(task="adjust-bar"))
    sym = PlanarEnv(EnvConfig(task="adjust-bar", bar_symmetric=True))
    assert fixed.success_from_goals(ends, ends) and sym.success_from_goals(ends, ends)
    assert not fixed.success_from_goals(ends[::-1], ends)
    assert sym.success_from_goals(ends[::-1], ends)


def test_info_interaction_and_gap():
    env = door_env()
    make_state(env, [[-0.2, 0.05], [0.3, -0.3]], [[-0.2, 0.1]], [[0.2, 0.0], env.door_goal])
    _, _, _, info = env.step(np.zeros((2, 2)))
    assert info["interacting"] == [True, False]
    assert info["gripper_distance"] == pytest.approx(math.hypot(0.5, 0.35))
