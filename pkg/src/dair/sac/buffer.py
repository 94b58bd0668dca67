"""Episode storage, hindsight relabelling and the replay ring."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..envs.planar import POS_SCALE


@dataclass
class Transition:
    entity_states: list
    actions: np.ndarray
    reward: float
    next_entity_states: list
    achieved_goals: np.ndarray
    desired_goals: np.ndarray
    done: bool


@dataclass
class Episode:
    """Stacked per-step arrays for one rollout (``T`` rows).

    Region observations are kept without their goal columns; the goal is
    appended at sampling time so that relabelling only touches ``goals``.
    ``achieved`` holds region positions after each step, ``done`` marks a
    true terminal (task success), and ``her_future`` records the future index
    a relabelled row drew its goal from (-1 for original rows).
    """

    agents: np.ndarray  # (T, N, 4)
    regions: np.ndarray  # (T, M, 4)
    goals: np.ndarray  # (T, M, 2) world coordinates
    actions: np.ndarray  # (T, N, 2)
    rewards: np.ndarray  # (T,)
    next_agents: np.ndarray
    next_regions: np.ndarray
    achieved: np.ndarray  # (T, M, 2)
    goal_free: np.ndarray  # (T,) reward part that does not depend on goals
    done: np.ndarray  # (T,)
    her_source: np.ndarray  # (T,) originating step
    her_future: np.ndarray  # (T,)

    def __len__(self):
        return len(self.rewards)

    @classmethod
    def concat(cls, eps):
        return cls(**{f.name: np.concatenate([getattr(e, f.name) for e in eps]) for f in fields(cls)})

    def transitions(self):
        """Yield :class:`Transition` views of each row."""
        from ..envs.planar import Observation

        for t in range(len(self)):
            g = self.goals[t] / POS_SCALE
            obs = Observation(self.agents[t], np.concatenate([self.regions[t], g], axis=1))
            nxt = Observation(self.next_agents[t], np.concatenate([self.next_regions[t], g], axis=1))
            yield Transition(
                entity_states=obs.entities(0),
                actions=self.actions[t],
                reward=float(self.rewards[t]),
                next_entity_states=nxt.entities(0),
                achieved_goals=self.achieved[t],
                desired_goals=self.goals[t],
                done=bool(self.done[t]),
            )


def her_relabel(episode, env, k=4, rng=None):
    """Append ``k`` future-goal copies of every step that has a later step.

    Goals of goal-bearing regions are replaced with the positions those
    regions reach at a step drawn uniformly from the strictly later steps of
    the same episode; rewards are recomputed with the environment's reward
    rule. Dynamics, actions and terminal flags are left untouched.
    """
    T = len(episode)
    if k <= 0 or T < 2:
        return episode
    src = np.repeat(np.arange(T - 1), k)
    # uniform over t+1 .. T-1
    span = (T - 1) - src
    fut = src + 1 + np.floor(rng.uniform(size=src.size) * span).astype(np.int64)
    fut = np.minimum(fut, T - 1)
    mask = env.goal_mask[None, :, None]
    new_goals = np.where(mask, episode.achieved[fut], episode.goals[src])
    rewards = relabel_rewards(env, episode.achieved, src, new_goals) + episode.goal_free[src]
    relabelled = Episode(
        agents=episode.agents[src],
        regions=episode.regions[src],
        goals=new_goals,
        actions=episode.actions[src],
        rewards=rewards,
        next_agents=episode.next_agents[src],
        next_regions=episode.next_regions[src],
        achieved=episode.achieved[src],
        goal_free=episode.goal_free[src],
        done=episode.done[src],
        her_source=episode.her_source[src],
        her_future=fut,
    )
    return Episode.concat([episode, relabelled])


def relabel_rewards(env, achieved, steps, goals):
    """Goal-dependent reward of row ``steps[r]`` under goal ``goals[r]``.

    ``achieved`` is the episode's ``(T, M, 2)`` trajectory; informative mode
    pays each sub-goal only the first time it is satisfied, so earlier steps
    are consulted.
    """
    cfg = env.cfg
    if cfg.reward_mode == "sparse":
        return env.success_from_goals(achieved[steps], goals).astype(np.float64)
    # (R, T, M) satisfaction of every step under every relabelled goal
    d = np.linalg.norm(achieved[None, :, :, :] - goals[:, None, :, :], axis=-1)
    sat = (d < cfg.success_radius) & env.goal_mask[None, None, :]
    T = achieved.shape[0]
    earlier = np.arange(T)[None, :] < steps[:, None]
    before = np.any(sat & earlier[:, :, None], axis=1)
    now = sat[np.arange(len(steps)), steps]
    return np.sum(now & ~before, axis=1).astype(np.float64)


@dataclass
class Batch:
    agents: np.ndarray  # (B, N, 4)
    regions: np.ndarray  # (B, M, 6)
    actions: np.ndarray  # (B, N, 2)
    rewards: np.ndarray  # (B,)
    next_agents: np.ndarray
    next_regions: np.ndarray
    done: np.ndarray  # (B,)

    def __len__(self):
        return len(self.rewards)


_STORED = ("agents", "regions", "goals", "actions", "rewards", "next_agents", "next_regions", "done")


class ReplayBuffer:
    """Fixed-capacity ring of transitions written one whole episode at a time.

    Arrays are allocated on the first insert, once entity counts are known.
    Sampling is uniform over every stored row, relabelled rows included.
    """

    def __init__(self, capacity=1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._data = None
        self._ptr = 0
        self._size = 0
        self.n_episodes = 0

    def __len__(self):
        return self._size

    def clear(self):
        self._data = None
        self._ptr = 0
        self._size = 0
        self.n_episodes = 0

    def add_episode(self, episode):
        n = len(episode)
        if n == 0:
            return
        if n > self.capacity:
            raise ValueError(f"episode of {n} rows does not fit a buffer of capacity {self.capacity}")
        if self._data is None:
            self._data = {
                k: np.zeros((self.capacity,) + getattr(episode, k).shape[1:], dtype=getattr(episode, k).dtype)
                for k in _STORED
            }
        else:
            for k in _STORED:
                if self._data[k].shape[1:] != getattr(episode, k).shape[1:]:
                    raise ValueError(
                        f"episode field {k!r} has shape {getattr(episode, k).shape[1:]}, "
                        f"buffer holds {self._data[k].shape[1:]}; flush before changing entity counts"
                    )
        idx = (self._ptr + np.arange(n)) % self.capacity
        for k in _STORED:
            self._data[k][idx] = getattr(episode, k)
        self._ptr = int((self._ptr + n) % self.capacity)
        self._size = min(self._size + n, self.capacity)
        self.n_episodes += 1

    def sample(self, batch_size, rng):
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        d = self._data
        g = d["goals"][idx] / POS_SCALE
        return Batch(
            agents=d["agents"][idx],
            regions=np.concatenate([d["regions"][idx], g], axis=-1),
            actions=d["actions"][idx],
            rewards=d["rewards"][idx],
            next_agents=d["next_agents"][idx],
            next_regions=np.concatenate([d["next_regions"][idx], g], axis=-1),
            done=d["done"][idx],
        )
