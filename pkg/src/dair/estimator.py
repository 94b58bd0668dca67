"""A scikit-learn style facade over the training loop.

``fit`` trains one seed in memory, ``predict`` maps flattened observations to
joint actions with the deterministic policy and ``score`` returns the
evaluation success rate. Hyperparameters round-trip through ``get_params`` and
``set_params`` so the estimator can be cloned.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import from_dict
from .nets import AGENT_DIM, REGION_DIM
from .sac.loop import evaluate, training_loop
from .sac.trainer import act


class DairAgent(BaseEstimator):
    """Two-agent (or single-agent reach) SAC team for one planar task.

    ``X`` rows for :meth:`predict` are ``N*4 + M*6`` observation vectors:
    agent features first, then region features, as produced by
    ``PlanarEnv.observe``.
    """

    def __init__(self, task="push-door", method="dair", lam=None, total_steps=20_000, n_objects=None,
                 reward_mode="sparse", embed_dim=64, batch_size=512, lr=1e-4, update_ratio=1.0,
                 eval_episodes=10, random_state=0):
        self.task = task
        self.method = method
        self.lam = lam
        self.total_steps = total_steps
        self.n_objects = n_objects
        self.reward_mode = reward_mode
        self.embed_dim = embed_dim
        self.batch_size = batch_size
        self.lr = lr
        self.update_ratio = update_ratio
        self.eval_episodes = eval_episodes
        self.random_state = random_state

    def experiment_config(self):
        env = {"reward_mode": self.reward_mode}
        stages = None
        if self.n_objects is not None:
            stages = [{"n_objects": int(self.n_objects), "budget": int(self.total_steps)}]
        raw = {
            "task": self.task,
            "method": self.method,
            "env": env,
            "dair": {"lambda": self.lam},
            "sac": {"batch_size": self.batch_size, "lr": self.lr},
            "net": {"embed_dim": self.embed_dim},
            "train": {"eval_every": 0, "eval_episodes": self.eval_episodes, "update_ratio": self.update_ratio},
        }
        cfg = from_dict(raw)
        if stages is None:
            m = cfg.stage_plan()[-1][0]
            stages = [{"n_objects": m, "budget": int(self.total_steps)}]
        cfg.curriculum.stages = stages
        cfg.curriculum.scale = 1.0
        cfg.env = cfg.env.with_objects(stages[0]["n_objects"])
        return cfg

    def fit(self, X=None, y=None):
        """Train from scratch; ``X`` and ``y`` are ignored (the task is the data)."""
        cfg = self.experiment_config()
        res = training_loop(cfg, int(self.random_state))
        self.config_ = cfg
        self.trainer_ = res.state
        self.history_ = res.rows
        self.eval_history_ = res.eval_rows
        self.n_agents_ = cfg.env.n_agents
        return self

    def predict(self, X):
        check_is_fitted(self, "trainer_")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n = self.n_agents_
        rest = X.shape[1] - n * AGENT_DIM
        if rest <= 0 or rest % REGION_DIM:
            raise ValueError(f"observation width {X.shape[1]} is not {n}*{AGENT_DIM} + M*{REGION_DIM}")
        agents = X[:, : n * AGENT_DIM].reshape(len(X), n, AGENT_DIM)
        regions = X[:, n * AGENT_DIM :].reshape(len(X), -1, REGION_DIM)
        actions, _ = act(self.trainer_, agents, regions, None, deterministic=True)
        return actions.reshape(len(X), -1)

    def score(self, X=None, y=None, n_objects=None):
        """Evaluation success rate in [0, 1] on fresh episodes."""
        check_is_fitted(self, "trainer_")
        env_cfg = self.config_.env if n_objects is None else self.config_.env.with_objects(n_objects)
        rng = np.random.default_rng(int(self.random_state) + 1)
        res = evaluate(self.trainer_, env_cfg, max(1, self.eval_episodes), rng)
        return float(np.mean([r.metrics.success for r in res]))
