import copy

import numpy as np
import pytest

from dair.autodiff import Tensor, check_grads, no_grad
from dair.dair_loss import DairConfig
from dair.envs.planar import EnvConfig, PlanarEnv
from dair.nets import sample_action, squashed_log_density
from dair.sac.buffer import Batch, ReplayBuffer, her_relabel
from dair.sac.loop import curriculum_advance, rollout
from dair.sac.trainer import (
    SACConfig,
    TrainingDiverged,
    actor_and_temperature_update,
    build_trainer,
    critic_update,
    load_state_arrays,
    polyak_update,
    soft_targets,
    state_arrays,
    train_step,
    update,
)


def setup(rng, task="push-door", n=2, batch=16, **kw):
    env = PlanarEnv(EnvConfig(task=task))
    state = build_trainer(n, SACConfig(batch_size=batch, embed_dim=8, buffer_size=1000, **kw), rng)
    buf = ReplayBuffer(1000)
    for r in rollout([PlanarEnv(env.cfg) for _ in range(2)], state, rng, rng):
        buf.add_episode(her_relabel(r.episode, env, 4, rng))
    return state, buf


def params_of(state):
    return {k: v.copy() for k, v in state_arrays(state).items()}


def test_terminal_success_target_is_reward(rng):
    state, buf = setup(rng)
    b = buf.sample(16, rng)
    b.rewards[:] = 1.0
    b.done[:] = True
    for y in soft_targets(b, state, rng):
        np.testing.assert_array_equal(y, 1.0)


def test_bootstrap_target_matches_direct_recomputation(rng):
    state, buf = setup(rng)
    b = buf.sample(16, rng)
    b.rewards[:] = 0.0
    b.done[:] = False
    r1 = np.random.default_rng(3)
    r2 = copy.deepcopy(r1)
    ys = soft_targets(b, state, r1)
    with no_grad():
        for i, ag in enumerate(state.agents):
            mean, log_std, _ = ag.policy(b.next_agents, b.next_regions)
            noise = r2.standard_normal(mean.shape)
            u = mean.data + np.exp(log_std.data) * noise
            a = np.tanh(u)
            logp = squashed_log_density(a, mean.data, log_std.data)
            qs = [q(b.next_agents, b.next_regions, a)[0].data for q in ag.q_targets]
            expect = 0.98 * (np.minimum(*qs) - ag.tau * logp)
            np.testing.assert_allclose(ys[i], expect, rtol=1e-7, atol=1e-9)


def test_entropy_correction_can_be_disabled(rng):
    state, buf = setup(rng, entropy_in_target=False)
    b = buf.sample(16, rng)
    b.done[:] = False
    y = soft_targets(b, state, np.random.default_rng(1))
    r = np.random.default_rng(1)
    with no_grad():
        ag = state.agents[0]
        mean, log_std, _ = ag.policy(b.next_agents, b.next_regions)
        a, _ = sample_action(mean, log_std, r)
        qs = [q(b.next_agents, b.next_regions, a.data)[0].data for q in ag.q_targets]
    np.testing.assert_allclose(y[0], b.rewards + 0.98 * np.minimum(*qs), rtol=1e-12)


def test_single_critic_option(rng):
    state, _ = setup(rng, twin_q=False)
    assert len(state.agents[0].qs) == 1 and len(state.agents[0].q_targets) == 1


def test_actor_loss_matches_reference_at_lambda_zero(rng):
    # one agent, one region: plain single-agent SAC
    state, buf = setup(rng, task="reach", n=1)
    b = buf.sample(16, rng)
    r1 = np.random.default_rng(11)
    r2 = copy.deepcopy(r1)
    ag = state.agents[0]
    with no_grad():
        mean, log_std, _ = ag.policy(b.agents, b.regions)
        noise = r2.standard_normal(mean.shape)
        a = np.tanh(mean.data + np.exp(log_std.data) * noise)
        logp = squashed_log_density(a, mean.data, log_std.data)
        q = np.minimum(*[qn(b.agents, b.regions, a)[0].data for qn in ag.qs])
    expect = float(np.mean(ag.tau * logp - q))
    q_before = [p.data.copy() for qn in ag.qs for p in qn.parameters()]
    out = actor_and_temperature_update(b, state, DairConfig(lam=0.0), r1)
    assert out["actor_loss"] == pytest.approx(expect, rel=1e-9)
    # critics are frozen during the actor step
    for before, p in zip(q_before, [p for qn in ag.qs for p in qn.parameters()]):
        np.testing.assert_array_equal(before, p.data)


def test_actor_gradient_matches_finite_differences(rng):
    state, buf = setup(rng, task="reach", n=1, batch=4)
    b = buf.sample(4, rng)
    ag = state.agents[0]
    noise = rng.standard_normal((4, 2))

    def loss():
        mean, log_std, _ = ag.policy(b.agents, b.regions)
        a, logp = sample_action(mean, log_std, noise=noise)
        q = ag.qs[0](b.agents, b.regions, a)[0]
        return (logp.scale(ag.tau) - q).mean()

    assert check_grads(loss, ag.policy.parameters()) < 1e-4


def test_temperature_moves_toward_target_entropy(rng):
    state, buf = setup(rng)
    b = buf.sample(16, rng)
    # target entropy far above the policy's: temperature must rise
    state.target_entropy = 50.0
    t0 = state.taus()
    actor_and_temperature_update(b, state, DairConfig(), rng)
    assert all(t1 > t for t, t1 in zip(t0, state.taus()))
    state.target_entropy = -50.0
    t0 = state.taus()
    actor_and_temperature_update(b, state, DairConfig(), rng)
    assert all(t1 < t for t, t1 in zip(t0, state.taus()))
    assert all(t > 0 for t in state.taus())


def test_polyak_lag_shrinks_when_online_frozen(rng):
    state, _ = setup(rng)
    q, t = state.agents[0].qs[0], state.agents[0].q_targets[0]
    for p in q.parameters():
        p.data += 0.1
    gaps = []
    for _ in range(5):
        polyak_update(state)
        gaps.append(max(np.max(np.abs(a.data - b.data)) for a, b in zip(q.parameters(), t.parameters())))
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    np.testing.assert_allclose(gaps[0], 0.1 * 0.995, rtol=1e-9)


def test_critic_update_reduces_bellman_error_on_fixed_batch(rng):
    state, buf = setup(rng, lr=1e-3)
    b = buf.sample(16, rng)
    first = critic_update(b, state, DairConfig(), np.random.default_rng(0))["critic_loss"]
    for _ in range(30):
        last = critic_update(b, state, DairConfig(), np.random.default_rng(0))["critic_loss"]
    assert last < first


def test_lambda_zero_equals_attention_baseline(rng):
    outs = []
    for dair in (DairConfig(lam=0.0), DairConfig(lam=0.05, apply_to_policy=False, apply_to_q=False)):
        r = np.random.default_rng(4)
        state, buf = setup(r)
        for _ in range(3):
            train_step(buf, state, dair, r)
        outs.append(state_arrays(state))
    for k in outs[0]:
        np.testing.assert_array_equal(outs[0][k], outs[1][k])


def test_dair_penalty_changes_update(rng):
    outs = []
    for lam in (0.0, 0.5):
        r = np.random.default_rng(4)
        state, buf = setup(r)
        train_step(buf, state, DairConfig(lam=lam), r)
        outs.append(state_arrays(state)["agent0.policy.w_q.weight"])
    assert not np.array_equal(*outs)


def test_underfull_buffer_skips(rng):
    state, buf = setup(rng, batch=16)
    small = ReplayBuffer(1000)
    assert train_step(small, state, DairConfig(), rng) is None
    assert train_step(buf, state, DairConfig(), rng) is not None


def test_non_finite_loss_raises_with_batch(rng):
    state, buf = setup(rng)
    b = buf.sample(16, rng)
    b.rewards[0] = np.nan
    with pytest.raises(TrainingDiverged) as ei:
        update(b, state, DairConfig(), rng)
    assert ei.value.batch is b


def test_curriculum_advance_keeps_parameters(rng):
    state, buf = setup(rng)
    n_before = sum(p.size for ag in state.agents for p in ag.policy.parameters())
    plan = [(1, 10), (2, 10), (3, 10)]
    assert curriculum_advance(state, buf, plan) == 2
    assert len(buf) == 0 and state.stage == 1
    assert train_step(buf, state, DairConfig(), rng) is None
    assert curriculum_advance(state, buf, plan) == 3
    assert curriculum_advance(state, buf, plan) is None and state.stage == 2
    assert sum(p.size for ag in state.agents for p in ag.policy.parameters()) == n_before


def test_state_arrays_round_trip(rng):
    state, buf = setup(rng)
    train_step(buf, state, DairConfig(), rng)
    arrays = state_arrays(state)
    other = build_trainer(2, state.cfg, np.random.default_rng(77))
    load_state_arrays(other, arrays)
    for k, v in state_arrays(other).items():
        np.testing.assert_array_equal(v, arrays[k])


def test_config_validation():
    with pytest.raises(ValueError):
        SACConfig(gamma=1.5)
    with pytest.raises(ValueError):
        SACConfig(polyak=1.0)
    with pytest.raises(ValueError):
        SACConfig(batch_size=10, buffer_size=5)
    assert SACConfig().gamma == 0.98 and SACConfig().batch_size == 512 and SACConfig().her_k == 4
