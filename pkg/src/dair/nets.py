"""Per-agent attention policy and Q networks, plus the flat MLP baseline.

Entities are passed batched: ``agents`` has shape ``(B, N, agent_dim)`` and
``regions`` has shape ``(B, M, region_dim)``. Unbatched ``(N, agent_dim)`` /
``(M, region_dim)`` inputs are accepted and the batch axis is dropped from
the outputs. Entity ``j`` in the attention simplex is agent ``j`` for
``j < N`` and region ``j - N`` otherwise.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, concat, layer_norm, softmax

AGENT_DIM = 4
REGION_DIM = 6
ACTION_DIM = 2
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


class IncompatibleEntityCount(ValueError):
    """A fixed-width network was given a different number of entities than it was built for."""


@dataclass(frozen=True)
class EntityState:
    kind: str  # "self-agent" | "other-agent" | "interaction-region"
    features: tuple

    def __post_init__(self):
        if self.kind not in ("self-agent", "other-agent", "interaction-region"):
            raise ValueError(f"unknown entity kind {self.kind!r}")


def entities_to_arrays(entities):
    """Split an entity list into ``(agents, regions)`` arrays, agents first."""
    agents = [e.features for e in entities if e.kind != "interaction-region"]
    regions = [e.features for e in entities if e.kind == "interaction-region"]
    n = len(agents)
    if any(e.kind != "interaction-region" for e in entities[n:]):
        raise ValueError("agent entities must precede interaction regions")
    return np.asarray(agents, dtype=np.float64), np.asarray(regions, dtype=np.float64)


@dataclass(frozen=True)
class NetConfig:
    n_agents: int = 2
    agent_index: int = 0
    head: str = "policy"  # "policy" | "q"
    embed_dim: int = 64
    agent_dim: int = AGENT_DIM
    region_dim: int = REGION_DIM
    action_dim: int = ACTION_DIM
    ln_eps: float = 1e-5
    arch: str = "attention"  # "attention" | "mlp"
    n_regions: int = 0  # fixed input width, mlp only

    def __post_init__(self):
        if self.head not in ("policy", "q"):
            raise ValueError(f"head must be 'policy' or 'q', got {self.head!r}")
        if not 0 <= self.agent_index < self.n_agents:
            raise ValueError(f"agent_index {self.agent_index} out of range for {self.n_agents} agents")
        if self.arch not in ("attention", "mlp"):
            raise ValueError(f"arch must be 'attention' or 'mlp', got {self.arch!r}")
        if self.arch == "mlp" and self.n_regions < 1:
            raise ValueError("mlp networks need a fixed n_regions >= 1")

    @property
    def out_dim(self):
        return 2 * self.action_dim if self.head == "policy" else 1


def _linear(rng, n_in, n_out, bias=True):
    bound = 1.0 / math.sqrt(n_in)
    w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
    if not bias:
        return w, None
    return w, Tensor(rng.uniform(-bound, bound, size=n_out), requires_grad=True)


class Module:
    """Named-parameter container with copy and (de)serialisation helpers."""

    def __init__(self):
        self.params = OrderedDict()

    def _add_linear(self, name, rng, n_in, n_out, bias=True):
        w, b = _linear(rng, n_in, n_out, bias)
        self.params[f"{name}.weight"] = w
        if b is not None:
            self.params[f"{name}.bias"] = b

    def _apply_linear(self, name, x):
        y = x @ self.params[f"{name}.weight"]
        b = self.params.get(f"{name}.bias")
        return y if b is None else y + b

    def _mlp(self, prefix, x, n_layers, final_relu):
        for k in range(n_layers):
            x = self._apply_linear(f"{prefix}.{k}", x)
            if k < n_layers - 1 or final_relu:
                x = x.relu()
        return x

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.copy()
            p.grad = None

    def flat_parameters(self):
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])


class AttentionNet(Module):
    """Entity encoders, scaled dot-product attention and a residual head.

    Three encoder groups exist regardless of entity count: one for the
    agent itself (which also sees its action in the Q variant), one shared by
    all other agents, and one shared by all interaction regions.
    """

    def __init__(self, cfg: NetConfig, rng):
        super().__init__()
        if cfg.arch != "attention":
            raise ValueError("AttentionNet requires arch='attention'")
        self.cfg = cfg
        d = cfg.embed_dim
        self_in = cfg.agent_dim + (cfg.action_dim if cfg.head == "q" else 0)
        self._add_linear("self_encoder.0", rng, self_in, d)
        self._add_linear("self_encoder.1", rng, d, d)
        self._add_linear("other_encoder.0", rng, cfg.agent_dim, d)
        self._add_linear("other_encoder.1", rng, d, d)
        self._add_linear("region_encoder.0", rng, cfg.region_dim, d)
        self._add_linear("region_encoder.1", rng, d, d)
        self._add_linear("w_q", rng, d, d, bias=False)
        self._add_linear("w_k", rng, d, d, bias=False)
        self._add_linear("g", rng, d, d)
        self.params["ln.gain"] = Tensor(np.ones(d), requires_grad=True)
        self.params["ln.bias"] = Tensor(np.zeros(d), requires_grad=True)
        self._add_linear("head.0", rng, d, d)
        self._add_linear("head.1", rng, d, cfg.out_dim)

    def encode(self, agents, regions, action=None):
        """Return ``(f_self, embeddings)`` with embeddings of shape ``(B, N+M, d)``."""
        cfg = self.cfg
        agents = np.asarray(agents, dtype=np.float64)
        regions = np.asarray(regions, dtype=np.float64)
        if agents.shape[1:] != (cfg.n_agents, cfg.agent_dim):
            raise ValueError(
                f"agent features have shape {agents.shape[1:]}, expected {(cfg.n_agents, cfg.agent_dim)}"
            )
        if regions.ndim != 3 or regions.shape[2] != cfg.region_dim or regions.shape[1] < 1:
            raise ValueError(f"region features have shape {regions.shape[1:]}, expected (M>=1, {cfg.region_dim})")
        if (action is None) != (cfg.head == "policy"):
            raise ValueError("own_action must be given iff the network is a Q network")
        i = cfg.agent_index
        b = agents.shape[0]
        self_in = Tensor(agents[:, i])
        if action is not None:
            if not isinstance(action, Tensor):
                action = Tensor(np.asarray(action, dtype=np.float64))
            if action.shape != (b, cfg.action_dim):
                raise ValueError(f"action has shape {action.shape}, expected {(b, cfg.action_dim)}")
            self_in = concat([self_in, action], axis=-1)
        f_self = self._mlp("self_encoder", self_in, 2, final_relu=True)
        parts = []
        if cfg.n_agents > 1:
            others = [j for j in range(cfg.n_agents) if j != i]
            f_other = self._mlp("other_encoder", Tensor(agents[:, others]), 2, final_relu=True)
            # splice self back in at position i to keep entity order
            before = f_other[:, :i] if i > 0 else None
            after = f_other[:, i:] if i < cfg.n_agents - 1 else None
            if before is not None:
                parts.append(before)
            parts.append(f_self.reshape(b, 1, cfg.embed_dim))
            if after is not None:
                parts.append(after)
        else:
            parts.append(f_self.reshape(b, 1, cfg.embed_dim))
        parts.append(self._mlp("region_encoder", Tensor(regions), 2, final_relu=True))
        return f_self, concat(parts, axis=1)

    def attend(self, f_self, embeddings):
        """Attention embedding ``v`` and the simplex ``alpha`` over entities."""
        d = self.cfg.embed_dim
        q = f_self @ self.params["w_q.weight"]
        k = embeddings @ self.params["w_k.weight"]
        b, e, _ = embeddings.shape
        logits = (k * q.reshape(b, 1, d)).sum(axis=-1).scale(1.0 / math.sqrt(d))
        alpha = softmax(logits, axis=-1)
        v = (alpha.reshape(b, e, 1) * embeddings).sum(axis=1)
        return v, alpha

    def __call__(self, agents, regions, action=None):
        agents, regions, action, single = _batchify(agents, regions, action)
        f_self, emb = self.encode(agents, regions, action)
        v, alpha = self.attend(f_self, emb)
        x = f_self + layer_norm(self._apply_linear("g", v), self.params["ln.gain"], self.params["ln.bias"], self.cfg.ln_eps)
        out = self._mlp("head", x, 2, final_relu=False)
        return _split_head(self.cfg, out, alpha, single)


class MLPNet(Module):
    """Concatenated-features baseline with a fixed number of regions."""

    def __init__(self, cfg: NetConfig, rng):
        super().__init__()
        if cfg.arch != "mlp":
            raise ValueError("MLPNet requires arch='mlp'")
        self.cfg = cfg
        d = cfg.embed_dim
        n_in = cfg.n_agents * cfg.agent_dim + cfg.n_regions * cfg.region_dim
        if cfg.head == "q":
            n_in += cfg.action_dim
        self._add_linear("mlp.0", rng, n_in, d)
        self._add_linear("mlp.1", rng, d, d)
        self._add_linear("mlp.2", rng, d, cfg.out_dim)

    def __call__(self, agents, regions, action=None):
        cfg = self.cfg
        agents, regions, action, single = _batchify(agents, regions, action)
        if regions.shape[1] != cfg.n_regions:
            raise IncompatibleEntityCount(
                f"MLP network was built for {cfg.n_regions} interaction regions but got {regions.shape[1]}; "
                "fixed-width inputs cannot handle a different number of objects"
            )
        if (action is None) != (cfg.head == "policy"):
            raise ValueError("own_action must be given iff the network is a Q network")
        b = agents.shape[0]
        i = cfg.agent_index
        order = [i] + [j for j in range(cfg.n_agents) if j != i]
        parts = [Tensor(agents[:, order].reshape(b, -1)), Tensor(regions.reshape(b, -1))]
        if action is not None:
            parts.append(action if isinstance(action, Tensor) else Tensor(action))
        out = self._mlp("mlp", concat(parts, axis=-1), 3, final_relu=False)
        return _split_head(cfg, out, None, single)


def _batchify(agents, regions, action):
    agents = np.asarray(agents, dtype=np.float64)
    regions = np.asarray(regions, dtype=np.float64)
    single = agents.ndim == 2
    if single:
        agents = agents[None]
        regions = regions[None]
        if action is not None:
            action = action.reshape(1, -1) if isinstance(action, Tensor) else np.asarray(action, dtype=np.float64)[None]
    return agents, regions, action, single


def _split_head(cfg, out, alpha, single):
    if cfg.head == "policy":
        a = cfg.action_dim
        mean = out[:, :a]
        log_std = out[:, a:].clip(LOG_STD_MIN, LOG_STD_MAX)
        if single:
            return mean.reshape(a), log_std.reshape(a), None if alpha is None else alpha.reshape(-1)
        return mean, log_std, alpha
    q = out.reshape(-1)
    if single:
        return q.reshape(()), None if alpha is None else alpha.reshape(-1)
    return q, alpha


def build_net(cfg: NetConfig, rng):
    return AttentionNet(cfg, rng) if cfg.arch == "attention" else MLPNet(cfg, rng)


def net_config_dict(cfg: NetConfig):
    return asdict(cfg)


# -- functional entry points -------------------------------------------------


def encode_entities(net, entities, own_action=None):
    """Per-entity embeddings for an entity list (agents first, then regions)."""
    agents, regions = entities_to_arrays(entities)
    if own_action is not None and not isinstance(own_action, Tensor):
        own_action = np.asarray(own_action, dtype=np.float64)[None]
    elif own_action is not None:
        own_action = own_action.reshape(1, -1)
    _, emb = net.encode(agents[None], regions[None], own_action)
    return [emb[0, j] for j in range(emb.shape[1])]


def attend(net, embeddings, self_index=None):
    """Attend from the self-agent embedding over a list of entity embeddings."""
    i = net.cfg.agent_index if self_index is None else self_index
    emb = concat([e.reshape(1, 1, -1) if isinstance(e, Tensor) else Tensor(np.reshape(e, (1, 1, -1))) for e in embeddings], axis=1)
    v, alpha = net.attend(emb[:, i], emb)
    return v.reshape(-1), alpha.reshape(-1)


def forward_policy(net, entities):
    agents, regions = entities_to_arrays(entities)
    return net(agents, regions)


def forward_q(net, entities, own_action):
    agents, regions = entities_to_arrays(entities)
    return net(agents, regions, own_action)


def sample_action(mean, log_std, rng=None, noise=None):
    """Reparameterised tanh-Gaussian sample and its exact log-density.

    ``mean`` and ``log_std`` are tensors of shape ``(..., A)``; the log
    density is summed over the last axis. Pass ``noise`` to fix the standard
    normal draw.
    """
    if noise is None:
        noise = rng.standard_normal(mean.shape)
    noise = np.asarray(noise, dtype=np.float64)
    u = mean + log_std.exp() * noise
    action = u.tanh()
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    log_det = (_LOG2 - u - (u.scale(-2.0)).softplus()).scale(2.0)
    gauss = -log_std - (0.5 * noise * noise + _HALF_LOG_2PI)
    log_prob = (gauss - log_det).sum(axis=-1)
    return action, log_prob


def squashed_log_density(action, mean, log_std):
    """Closed-form log-density of a tanh-Gaussian at ``action`` (numpy)."""
    action = np.asarray(action, dtype=np.float64)
    u = np.arctanh(action)
    std = np.exp(log_std)
    z = (u - mean) / std
    return np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI - np.log1p(-action * action), axis=-1)
