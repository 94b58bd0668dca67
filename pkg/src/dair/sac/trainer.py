"""Multi-agent soft actor-critic updates with the attention-overlap penalty.

Every agent owns a policy, twin Q networks, their Polyak-averaged targets and
a learned temperature. Critic and actor losses of all agents are summed into
one scalar per update so the overlap penalty can back-propagate into every
agent's attention at once.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Adam, Tensor, minimum, no_grad
from ..dair_loss import DairConfig, attn_overlap_loss, joint_policy_loss, joint_q_loss
from ..nets import ACTION_DIM, NetConfig, build_net, sample_action


class TrainingDiverged(FloatingPointError):
    """A loss became non-finite."""

    def __init__(self, message, batch=None):
        super().__init__(message)
        self.batch = batch


@dataclass
class SACConfig:
    lr: float = 1e-4
    gamma: float = 0.98
    batch_size: int = 512
    buffer_size: int = 1_000_000
    her_k: int = 4
    polyak: float = 0.995
    init_temperature: float = 0.1
    target_entropy: float | None = None
    twin_q: bool = True
    entropy_in_target: bool = True
    embed_dim: int = 64
    episodes_per_collection: int = 2
    updates_per_collection: int | None = None
    warmup_episodes: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.polyak < 1.0:
            raise ValueError(f"polyak must lie in [0, 1), got {self.polyak}")
        if self.init_temperature <= 0:
            raise ValueError("init_temperature must be positive")
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_size")


@dataclass
class AgentNets:
    policy: object
    qs: list
    q_targets: list
    log_tau: Tensor
    policy_opt: Adam
    q_opt: Adam
    tau_opt: Adam

    @property
    def tau(self):
        return float(math.exp(self.log_tau.data))


@dataclass
class TrainerState:
    agents: list
    target_entropy: float
    cfg: SACConfig
    arch: str
    n_regions: int
    updates: int = 0
    env_steps: int = 0
    episodes: int = 0
    stage: int = 0
    last_losses: dict = field(default_factory=dict)

    @property
    def n_agents(self):
        return len(self.agents)

    def taus(self):
        return [a.tau for a in self.agents]


def build_trainer(n_agents, cfg: SACConfig, rng, arch="attention", n_regions=0):
    """Fresh networks, targets and optimisers for ``n_agents`` agents."""
    agents = []
    n_q = 2 if cfg.twin_q else 1
    for i in range(n_agents):
        kw = dict(n_agents=n_agents, agent_index=i, embed_dim=cfg.embed_dim, arch=arch, n_regions=n_regions)
        policy = build_net(NetConfig(head="policy", **kw), rng)
        qs = [build_net(NetConfig(head="q", **kw), rng) for _ in range(n_q)]
        targets = []
        for q in qs:
            t = build_net(q.cfg, rng)
            t.load_state_dict(q.state_dict())
            for p in t.parameters():
                p.requires_grad = False
            targets.append(t)
        log_tau = Tensor(np.array(math.log(cfg.init_temperature)), requires_grad=True)
        agents.append(
            AgentNets(
                policy=policy,
                qs=qs,
                q_targets=targets,
                log_tau=log_tau,
                policy_opt=Adam(policy.parameters(), lr=cfg.lr),
                q_opt=Adam([p for q in qs for p in q.parameters()], lr=cfg.lr),
                tau_opt=Adam([log_tau], lr=cfg.lr),
            )
        )
    target_entropy = -float(ACTION_DIM) if cfg.target_entropy is None else float(cfg.target_entropy)
    return TrainerState(agents=agents, target_entropy=target_entropy, cfg=cfg, arch=arch, n_regions=n_regions)


@contextmanager
def frozen(params):
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _check_finite(name, value, batch):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{name} became non-finite ({value!r})", batch)


def soft_targets(batch, state, rng):
    """Bootstrapped soft Bellman targets, one ``(B,)`` array per agent."""
    cfg = state.cfg
    out = []
    not_done = 1.0 - batch.done.astype(np.float64)
    with no_grad():
        for i, ag in enumerate(state.agents):
            mean, log_std, _ = ag.policy(batch.next_agents, batch.next_regions)
            a_next, logp = sample_action(mean, log_std, rng)
            qn = None
            for t in ag.q_targets:
                q, _ = t(batch.next_agents, batch.next_regions, a_next)
                qn = q.data if qn is None else np.minimum(qn, q.data)
            if cfg.entropy_in_target:
                qn = qn - ag.tau * logp.data
            out.append(batch.rewards + cfg.gamma * not_done * qn)
    return out


def critic_loss(batch, state, dair: DairConfig, targets):
    """Joint critic objective: Bellman residuals plus the Q-branch overlap.

    Returns ``(total, bellman, overlap_value)`` where ``bellman`` holds one
    loss tensor per agent.
    """
    bellman = []
    alphas = [[] for _ in state.agents[0].qs]
    for i, ag in enumerate(state.agents):
        y = Tensor(targets[i])
        a_i = batch.actions[:, i]
        loss = None
        for k, q in enumerate(ag.qs):
            pred, alpha = q(batch.agents, batch.regions, a_i)
            term = (pred - y).square().mean().scale(0.5)
            loss = term if loss is None else loss + term
            alphas[k].append(alpha)
        bellman.append(loss)
    total = None
    overlap_value = 0.0
    for i in range(state.n_agents):
        overlap = _overlap(alphas, i, dair)
        if overlap is not None:
            overlap_value += overlap.item()
            joint = joint_q_loss(bellman[i], overlap, dair)
        else:
            joint = bellman[i]
        total = joint if total is None else total + joint
    return total, bellman, overlap_value


def critic_update(batch, state, dair: DairConfig, rng):
    """One gradient step on every agent's Q networks, then Polyak targets.

    Returns the summed Bellman loss and the Q-attention overlap.
    """
    targets = soft_targets(batch, state, rng)
    total, bellman, overlap_value = critic_loss(batch, state, dair, targets)
    _check_finite("critic loss", total.item(), batch)
    total.backward()
    for ag in state.agents:
        ag.q_opt.step()
    polyak_update(state)
    return {"critic_loss": float(sum(b.item() for b in bellman)), "q_overlap": overlap_value}


def _overlap(alpha_groups, i, dair):
    """Overlap for agent ``i`` summed over the given alpha groups, or None."""
    out = None
    for group in alpha_groups:
        if len(group) < 2 or group[0] is None:
            return None
        term = attn_overlap_loss(group, i, detach_partner=dair.detach_partner)
        out = term if out is None else out + term
    return out


def actor_loss(batch, state, dair: DairConfig, rng):
    """Joint policy objective with reparameterised actions drawn from ``rng``.

    Returns ``(total, sac_losses, overlap_value, log_probs)``; ``log_probs``
    are plain arrays for the temperature step.
    """
    sac_losses = []
    alphas = []
    log_probs = []
    for ag in state.agents:
        mean, log_std, alpha = ag.policy(batch.agents, batch.regions)
        action, logp = sample_action(mean, log_std, rng)
        qv = None
        for q in ag.qs:
            val, _ = q(batch.agents, batch.regions, action)
            qv = val if qv is None else minimum(qv, val)
        sac_losses.append((logp.scale(ag.tau) - qv).mean())
        alphas.append(alpha)
        log_probs.append(logp.data)
    total = None
    overlap_value = 0.0
    for i in range(state.n_agents):
        overlap = _overlap([alphas], i, dair)
        if overlap is not None:
            overlap_value += overlap.item()
            joint = joint_policy_loss(sac_losses[i], overlap, dair)
        else:
            joint = sac_losses[i]
        total = joint if total is None else total + joint
    return total, sac_losses, overlap_value, log_probs


def temperature_loss(agent: AgentNets, log_prob, target_entropy):
    """``E[-tau * (log pi + H)]`` as a function of ``log tau`` only."""
    tau = agent.log_tau.exp()
    return (tau * Tensor(-(log_prob + target_entropy))).mean()


def actor_and_temperature_update(batch, state, dair: DairConfig, rng):
    """Reparameterised policy step for every agent, then the temperature step."""
    q_params = [p for ag in state.agents for q in ag.qs for p in q.parameters()]
    with frozen(q_params):
        total, sac_losses, overlap_value, log_probs = actor_loss(batch, state, dair, rng)
        _check_finite("actor loss", total.item(), batch)
        total.backward()
    for ag in state.agents:
        ag.policy_opt.step()
        # the Q networks were frozen, but keep their grads clean regardless
        for q in ag.qs:
            for p in q.parameters():
                p.grad = None
    temp_loss = 0.0
    for ag, logp in zip(state.agents, log_probs):
        loss = temperature_loss(ag, logp, state.target_entropy)
        _check_finite("temperature loss", loss.item(), batch)
        loss.backward()
        ag.tau_opt.step()
        temp_loss += loss.item()
    state.updates += 1
    return {
        "actor_loss": float(sum(l.item() for l in sac_losses)),
        "pi_overlap": overlap_value,
        "temperature_loss": temp_loss,
        "entropy": float(-np.mean([lp.mean() for lp in log_probs])),
    }


def polyak_update(state):
    rho = state.cfg.polyak
    for ag in state.agents:
        for q, t in zip(ag.qs, ag.q_targets):
            for p, tp in zip(q.parameters(), t.parameters()):
                tp.data *= rho
                tp.data += (1.0 - rho) * p.data


def update(batch, state, dair, rng):
    losses = critic_update(batch, state, dair, rng)
    losses.update(actor_and_temperature_update(batch, state, dair, rng))
    state.last_losses = losses
    return losses


# -- acting --------------------------------------------------------------------


def act(state, agents, regions, rng, deterministic=False):
    """Actions for a batch of observations.

    ``agents`` is ``(K, N, 4)`` and ``regions`` ``(K, M, 6)``; returns actions
    ``(K, N, 2)`` in [-1, 1] and one ``(K, N+M)`` attention array per agent
    (None for the MLP baseline). Deterministic mode uses the squashed mean.
    """
    actions = []
    alphas = []
    with no_grad():
        for ag in state.agents:
            mean, log_std, alpha = ag.policy(agents, regions)
            if deterministic:
                a = np.tanh(mean.data)
            else:
                a = sample_action(mean, log_std, rng)[0].data
            actions.append(a)
            alphas.append(None if alpha is None else alpha.data)
    return np.stack(actions, axis=1), alphas


def train_step(buffer, state, dair, rng):
    """Sample a batch and run one full update; None while the buffer is underfull."""
    if len(buffer) < state.cfg.batch_size:
        return None
    return update(buffer.sample(state.cfg.batch_size, rng), state, dair, rng)


# -- (de)serialisation -----------------------------------------------------------


def state_arrays(state):
    """Flat ``name -> array`` map of every parameter and optimiser moment."""
    out = {}
    for i, ag in enumerate(state.agents):
        for k, v in ag.policy.state_dict().items():
            out[f"agent{i}.policy.{k}"] = v
        for j, (q, t) in enumerate(zip(ag.qs, ag.q_targets)):
            for k, v in q.state_dict().items():
                out[f"agent{i}.q{j}.{k}"] = v
            for k, v in t.state_dict().items():
                out[f"agent{i}.q{j}_target.{k}"] = v
        out[f"agent{i}.log_tau"] = np.array(ag.log_tau.data)
        for name, opt in (("policy_opt", ag.policy_opt), ("q_opt", ag.q_opt), ("tau_opt", ag.tau_opt)):
            out[f"agent{i}.{name}.t"] = np.array(float(opt.state.t))
            for j, (m, v) in enumerate(zip(opt.state.m, opt.state.v)):
                out[f"agent{i}.{name}.m{j}"] = m
                out[f"agent{i}.{name}.v{j}"] = v
    return out


def load_state_arrays(state, arrays, policies_only=False):
    for i, ag in enumerate(state.agents):
        ag.policy.load_state_dict(_prefixed(arrays, f"agent{i}.policy."))
        if policies_only:
            continue
        for j, (q, t) in enumerate(zip(ag.qs, ag.q_targets)):
            q.load_state_dict(_prefixed(arrays, f"agent{i}.q{j}."))
            t.load_state_dict(_prefixed(arrays, f"agent{i}.q{j}_target."))
            for p in t.parameters():
                p.requires_grad = False
        ag.log_tau.data = np.array(arrays[f"agent{i}.log_tau"], dtype=np.float64)
        for name, opt in (("policy_opt", ag.policy_opt), ("q_opt", ag.q_opt), ("tau_opt", ag.tau_opt)):
            key = f"agent{i}.{name}.t"
            if key not in arrays:
                continue
            opt.state.t = int(arrays[key])
            n = len(opt.params)
            if f"agent{i}.{name}.m0" in arrays:
                opt.state.m = [np.array(arrays[f"agent{i}.{name}.m{j}"]) for j in range(n)]
                opt.state.v = [np.array(arrays[f"agent{i}.{name}.v{j}"]) for j in range(n)]


def _prefixed(arrays, prefix):
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
