import numpy as np
import pytest
from scipy import stats

from dair.envs.planar import POS_SCALE, EnvConfig, PlanarEnv
from dair.sac.buffer import Episode, ReplayBuffer, her_relabel, relabel_rewards


def random_episode(env, rng, T=10):
    obs = env.reset(rng)
    rows = {k: [] for k in ("agents", "regions", "goals", "actions", "rewards", "next_agents", "next_regions", "achieved", "goal_free", "done")}
    for _ in range(T):
        a = rng.uniform(-1, 1, size=(env.cfg.n_agents, 2))
        goals = env.state.goals.copy()
        nxt, r, done, info = env.step(a)
        for k, v in (("agents", obs.agents), ("regions", obs.regions[:, :4]), ("goals", goals), ("actions", a),
                     ("rewards", r), ("next_agents", nxt.agents), ("next_regions", nxt.regions[:, :4]),
                     ("achieved", info["achieved_goals"]), ("goal_free", info["goal_free_reward"]), ("done", info["is_success"])):
            rows[k].append(v)
        obs = nxt
    T = len(rows["rewards"])
    return Episode(**{k: np.asarray(v) for k, v in rows.items()}, her_source=np.arange(T), her_future=-np.ones(T, dtype=int))


def reach_env():
    return PlanarEnv(EnvConfig(task="reach"))


def test_relabelled_size_and_fields(rng):
    env = PlanarEnv(EnvConfig(task="push-door"))
    ep = random_episode(env, rng)
    aug = her_relabel(ep, env, k=4, rng=rng)
    assert len(aug) == len(ep) + 4 * (len(ep) - 1) <= 5 * len(ep)
    new = slice(len(ep), None)
    src = aug.her_source[new]
    # dynamics, actions and terminal flags untouched
    for f in ("agents", "regions", "actions", "next_agents", "next_regions", "done"):
        np.testing.assert_array_equal(getattr(aug, f)[new], getattr(ep, f)[src])
    assert np.all(aug.her_future[new] > src)
    # door region goal is not relabelled
    np.testing.assert_array_equal(aug.goals[new][:, 1], ep.goals[src][:, 1])
    np.testing.assert_array_equal(aug.goals[new][:, 0], ep.achieved[aug.her_future[new]][:, 0])


def test_goal_equal_to_own_achieved_state_gets_success_reward(rng):
    env = reach_env()
    ep = random_episode(env, rng)
    aug = her_relabel(ep, env, k=4, rng=rng)
    new = slice(len(ep), None)
    src, fut = aug.her_source[new], aug.her_future[new]
    d = np.linalg.norm(ep.achieved[src] - ep.achieved[fut], axis=-1)[:, 0]
    np.testing.assert_array_equal(aug.rewards[new], (d < env.cfg.success_radius).astype(float))
    # a goal equal to the step's own achieved state pays the success reward
    r = relabel_rewards(env, ep.achieved, np.array([3]), ep.achieved[[3]])
    assert r[0] == 1.0


def test_final_step_gets_no_relabels(rng):
    env = reach_env()
    ep = random_episode(env, rng, T=6)
    aug = her_relabel(ep, env, k=4, rng=rng)
    assert np.all(aug.her_source[len(ep):] < len(ep) - 1)
    one = random_episode(env, rng, T=1)
    assert len(her_relabel(one, env, k=4, rng=rng)) == 1


def test_future_indices_uniform_chi_square():
    rng = np.random.default_rng(2024)
    env = reach_env()
    ep = random_episode(env, rng, T=10)
    counts = np.zeros((10, 10))
    n = 0
    while n < 10_000:
        aug = her_relabel(ep, env, k=4, rng=rng)
        s, f = aug.her_source[10:], aug.her_future[10:]
        np.add.at(counts, (s, f), 1)
        n += len(s)
    for t in range(9):
        obs = counts[t, t + 1 :]
        assert counts[t, : t + 1].sum() == 0
        if len(obs) > 1:
            assert stats.chisquare(obs).pvalue > 0.01


def test_informative_relabel_latches_subgoals():
    env = PlanarEnv(EnvConfig(task="rearrange", n_objects=1, reward_mode="informative"))
    achieved = np.array([[[0.0, 0.0]], [[0.1, 0.0]], [[0.0, 0.0]]])
    goal = np.array([[[0.0, 0.0]]] * 3)
    r = relabel_rewards(env, achieved, np.array([0, 1, 2]), goal[:, 0][:, None, :].reshape(3, 1, 2))
    # satisfied at step 0, left at step 1, back at step 2: paid once
    np.testing.assert_array_equal(r, [1.0, 0.0, 0.0])


def test_buffer_ring_and_sampling(rng):
    env = PlanarEnv(EnvConfig(task="push-door"))
    buf = ReplayBuffer(capacity=25)
    ep = random_episode(env, rng, T=10)
    for _ in range(3):
        buf.add_episode(ep)
    assert len(buf) == 25 and buf.n_episodes == 3
    b = buf.sample(7, rng)
    assert b.agents.shape == (7, 2, 4) and b.regions.shape == (7, 2, 6) and b.actions.shape == (7, 2, 2)
    # goals appended in observation scale
    rows = [np.flatnonzero(np.all(ep.agents == a, axis=(1, 2)))[0] for a in b.agents]
    np.testing.assert_allclose(b.regions[:, :, 4:], ep.goals[rows] / POS_SCALE)
    np.testing.assert_array_equal(b.regions[:, :, :4], ep.regions[rows])
    buf.clear()
    assert len(buf) == 0
    with pytest.raises(ValueError):
        buf.sample(1, rng)


def test_buffer_rejects_mixed_entity_counts(rng):
    buf = ReplayBuffer(100)
    buf.add_episode(random_episode(PlanarEnv(EnvConfig(task="rearrange", n_objects=1)), rng))
    with pytest.raises(ValueError, match="flush"):
        buf.add_episode(random_episode(PlanarEnv(EnvConfig(task="rearrange", n_objects=2)), rng))
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_transitions_view(rng):
    env = PlanarEnv(EnvConfig(task="rearrange", n_objects=2))
    ep = random_episode(env, rng, T=3)
    tr = list(ep.transitions())
    assert len(tr) == 3
    assert len(tr[0].entity_states) == 4
    np.testing.assert_array_equal(tr[1].desired_goals, ep.goals[1])
