"""Planar two-point-mass manipulation tasks on a 1.0 x 0.7 table.

Agents are kinematic discs that move by at most ``max_step`` per tick.
Blocks are discs pushed quasi-statically: any block an agent penetrates is
projected out along the contact normal, with no restitution. The table is
centred on the origin, so x spans [-0.5, 0.5] and y spans [-0.35, 0.35].

Tasks
-----
reach       one agent drives its own marker onto a goal (sanity task)
rearrange   push ``n_objects`` blocks onto their goals
push-door   push a block through a spring-loaded sliding door in a wall at x=0
push-box    push-door variant: the goal lies in a box pocket behind the door
            and a block that has entered the box cannot leave it
adjust-bar  carry a heavy bar whose two ends must both be held to move it

See ``docs/environments.md`` for the door layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..nets import AGENT_DIM, REGION_DIM, EntityState

TASKS = ("reach", "rearrange", "push-door", "push-box", "adjust-bar")
_FIXED_OBJECTS = {"reach": 1, "push-door": 2, "push-box": 2, "adjust-bar": 2}

TABLE_HALF = (0.5, 0.35)
POS_SCALE = 0.25
WALL_HALF = 0.01
DOOR_HALF = 0.08
HANDLE_OFFSET = 0.0
BOX_POCKET = ((0.06, 0.16), (-0.06, 0.06))


class SpawnError(RuntimeError):
    """Rejection sampling could not place every entity."""


@dataclass(frozen=True)
class EnvConfig:
    task: str = "rearrange"
    n_objects: int | None = None
    n_agents: int | None = None
    reward_mode: str = "sparse"
    collision_penalty: bool = False
    success_radius: float = 0.05
    agent_radius: float = 0.02
    block_radius: float = 0.025
    max_step: float = 0.03
    spring_rate: float = 0.05
    open_rate: float = 0.15
    door_open_threshold: float = 0.9
    handle_radius: float = 0.05
    bar_length: float = 0.2
    grip_radius: float = 0.04
    bar_symmetric: bool = False
    interaction_threshold: float = 0.06
    conflict_threshold: float = 0.06
    collision_distance: float = 0.04
    agent_spawn_half: float = 0.2
    object_spawn_radius: float = 0.2
    steps_per_object: int = 50
    max_spawn_tries: int = 1000

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.reward_mode not in ("sparse", "informative"):
            raise ValueError(f"reward_mode must be 'sparse' or 'informative', got {self.reward_mode!r}")
        if self.n_objects is None:
            object.__setattr__(self, "n_objects", _FIXED_OBJECTS.get(self.task, 1))
        if self.n_agents is None:
            object.__setattr__(self, "n_agents", 1 if self.task == "reach" else 2)
        fixed = _FIXED_OBJECTS.get(self.task)
        if fixed is not None and self.n_objects != fixed:
            raise ValueError(f"task {self.task!r} has exactly {fixed} interaction regions, got n_objects={self.n_objects}")
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if self.task != "reach" and self.n_agents != 2:
            raise ValueError(f"task {self.task!r} needs 2 agents")
        if self.task == "reach" and self.n_agents != 1:
            raise ValueError("reach is a single-agent task")

    @property
    def horizon(self):
        return self.steps_per_object * self.n_objects

    @property
    def n_regions(self):
        return self.n_objects

    def with_objects(self, n):
        return replace(self, n_objects=n)


@dataclass
class WorldState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    obj_pos: np.ndarray  # blocks, bar ends, or empty
    obj_vel: np.ndarray
    goals: np.ndarray  # (M, 2) desired goal per region
    slider: float = 0.0
    slider_vel: float = 0.0
    step: int = 0
    satisfied: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    door_was_open: bool = False
    boxed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def copy(self):
        return WorldState(
            self.agent_pos.copy(),
            self.agent_vel.copy(),
            self.obj_pos.copy(),
            self.obj_vel.copy(),
            self.goals.copy(),
            self.slider,
            self.slider_vel,
            self.step,
            self.satisfied.copy(),
            self.door_was_open,
            self.boxed.copy(),
        )


@dataclass
class Observation:
    agents: np.ndarray  # (N, AGENT_DIM)
    regions: np.ndarray  # (M, REGION_DIM)

    def entities(self, agent_index=0):
        """Entity list from ``agent_index``'s point of view, agents first."""
        out = []
        for j, f in enumerate(self.agents):
            kind = "self-agent" if j == agent_index else "other-agent"
            out.append(EntityState(kind, tuple(float(x) for x in f)))
        for f in self.regions:
            out.append(EntityState("interaction-region", tuple(float(x) for x in f)))
        return out


def _rot(theta):
    return np.array([math.cos(theta), math.sin(theta)])


class PlanarEnv:
    """Gym-style environment: ``reset(rng)`` then repeated ``step(actions)``."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self.state = None
        self._rng = None
        t = cfg.task
        self.has_door = t in ("push-door", "push-box")
        self.n_blocks = cfg.n_objects if t == "rearrange" else (1 if self.has_door else 0)
        # regions whose goal is an object position (door goal is fixed)
        self.goal_mask = np.ones(cfg.n_objects, dtype=bool)
        if self.has_door:
            self.goal_mask[1] = False

    # -- geometry helpers -------------------------------------------------
    def handle_pos(self, slider):
        return np.array([0.0, DOOR_HALF + HANDLE_OFFSET + 2.0 * DOOR_HALF * slider])

    @property
    def door_goal(self):
        return self.handle_pos(1.0)

    def _band(self):
        return WALL_HALF + self.cfg.block_radius

    def _passable(self, y, slider):
        r = self.cfg.block_radius
        return y - r >= -DOOR_HALF - 1e-12 and y + r <= -DOOR_HALF + 2.0 * DOOR_HALF * slider + 1e-12

    def achieved_goals(self, state=None):
        """Current position of every region, shape ``(M, 2)``."""
        s = self.state if state is None else state
        t = self.cfg.task
        if t == "reach":
            return s.agent_pos[:1].copy()
        if self.has_door:
            return np.stack([s.obj_pos[0], self.handle_pos(s.slider)])
        return s.obj_pos.copy()

    def region_velocities(self, state=None):
        s = self.state if state is None else state
        t = self.cfg.task
        if t == "reach":
            return s.agent_vel[:1].copy()
        if self.has_door:
            return np.stack([s.obj_vel[0], np.array([0.0, 2.0 * DOOR_HALF * s.slider_vel])])
        return s.obj_vel.copy()

    def interaction_points(self, state=None):
        return self.achieved_goals(state)

    # -- observation ------------------------------------------------------
    def observe(self, state=None):
        s = self.state if state is None else state
        ms = self.cfg.max_step
        agents = np.concatenate([s.agent_pos / POS_SCALE, s.agent_vel / ms], axis=1)
        regions = np.concatenate(
            [self.achieved_goals(s) / POS_SCALE, self.region_velocities(s) / ms, s.goals / POS_SCALE], axis=1
        )
        assert agents.shape[1] == AGENT_DIM and regions.shape[1] == REGION_DIM
        return Observation(agents, regions)

    # -- reset ------------------------------------------------------------
    def reset(self, rng):
        cfg = self.cfg
        self._rng = rng
        for _ in range(cfg.max_spawn_tries):
            state = self._try_spawn(rng)
            if state is not None:
                self.state = state
                return self.observe()
        raise SpawnError(
            f"could not place {cfg.n_agents} agents and {cfg.n_objects} objects for task {cfg.task!r} "
            f"within {cfg.max_spawn_tries} tries"
        )

    def _disc(self, rng, radius):
        r = radius * math.sqrt(rng.uniform())
        return r * _rot(rng.uniform(0.0, 2.0 * math.pi))

    def _try_spawn(self, rng):
        cfg = self.cfg
        h = cfg.agent_spawn_half
        agents = rng.uniform(-h, h, size=(cfg.n_agents, 2))
        if cfg.n_agents == 2 and np.linalg.norm(agents[0] - agents[1]) < 2 * cfg.agent_radius + 0.01:
            return None
        t = cfg.task
        m = cfg.n_objects
        goals = np.zeros((m, 2))
        objs = np.zeros((self.n_blocks if t != "adjust-bar" else 2, 2))
        far = cfg.success_radius * 2.0
        if t == "reach":
            goals[0] = self._disc(rng, cfg.object_spawn_radius)
            if np.linalg.norm(goals[0] - agents[0]) < far:
                return None
        elif t == "rearrange":
            for k in range(m):
                objs[k] = self._disc(rng, cfg.object_spawn_radius)
                goals[k] = self._disc(rng, cfg.object_spawn_radius)
                if np.linalg.norm(objs[k] - goals[k]) < far:
                    return None
            for a in range(m):
                for b in range(a + 1, m):
                    if np.linalg.norm(objs[a] - objs[b]) < 2 * cfg.block_radius + 0.005:
                        return None
        elif self.has_door:
            band = self._band()
            objs[0] = self._disc(rng, cfg.object_spawn_radius)
            if objs[0][0] > -band - 0.01:
                return None
            if t == "push-door":
                goals[0] = self._disc(rng, cfg.object_spawn_radius)
                if goals[0][0] < band + 0.01:
                    return None
            else:
                (x0, x1), (y0, y1) = BOX_POCKET
                goals[0] = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
            goals[1] = self.door_goal
        else:  # adjust-bar
            half = 0.5 * cfg.bar_length
            c = self._disc(rng, cfg.object_spawn_radius)
            d = _rot(rng.uniform(0.0, 2.0 * math.pi))
            objs[0], objs[1] = c - half * d, c + half * d
            gc = self._disc(rng, cfg.object_spawn_radius)
            gd = _rot(rng.uniform(0.0, 2.0 * math.pi))
            goals[0], goals[1] = gc - half * gd, gc + half * gd
            if max(np.linalg.norm(objs[0] - goals[0]), np.linalg.norm(objs[1] - goals[1])) < far:
                return None
        if not self._inside(objs, cfg.block_radius) or not self._inside(goals, 0.0):
            return None
        if t != "adjust-bar":
            for p in agents:
                for o in objs:
                    if np.linalg.norm(p - o) < cfg.agent_radius + cfg.block_radius + 0.005:
                        return None
        state = WorldState(
            agent_pos=agents,
            agent_vel=np.zeros_like(agents),
            obj_pos=objs,
            obj_vel=np.zeros_like(objs),
            goals=goals,
            satisfied=np.zeros(m, dtype=bool),
            boxed=np.zeros(len(objs), dtype=bool),
        )
        if self.success(state):
            return None
        return state

    @staticmethod
    def _inside(points, radius):
        if len(points) == 0:
            return True
        return bool(
            np.all(np.abs(points[:, 0]) <= TABLE_HALF[0] - radius) and np.all(np.abs(points[:, 1]) <= TABLE_HALF[1] - radius)
        )

    # -- dynamics ---------------------------------------------------------
    def step(self, actions):
        """Advance one tick. ``actions`` has shape ``(N, 2)`` with entries in [-1, 1]."""
        cfg = self.cfg
        actions = np.asarray(actions, dtype=np.float64).reshape(cfg.n_agents, 2)
        if not np.all(np.isfinite(actions)):
            raise ValueError(f"non-finite action components: {actions.tolist()}")
        prev = self.state
        nxt = self.transition(prev, actions)
        reward, info = self._score(prev, nxt)
        self.state = nxt
        done = info["is_success"] or nxt.step >= cfg.horizon
        info["truncated"] = bool(nxt.step >= cfg.horizon and not info["is_success"])
        return self.observe(), reward, done, info

    def transition(self, state, actions):
        """Pure dynamics: return the next state without touching ``self.state``."""
        cfg = self.cfg
        s = state.copy()
        disp = np.clip(actions, -1.0, 1.0) * cfg.max_step
        lo = np.array([-TABLE_HALF[0] + cfg.agent_radius, -TABLE_HALF[1] + cfg.agent_radius])
        new_agents = np.clip(s.agent_pos + disp, lo, -lo)
        old_obj = s.obj_pos.copy()
        t = cfg.task
        if t == "adjust-bar":
            self._move_bar(s, new_agents)
        else:
            moved = np.zeros(len(s.obj_pos), dtype=bool)
            for k in range(cfg.n_agents):
                self._push_blocks(s, k, new_agents, moved)
            self._separate_blocks(s, moved)
            for k in range(cfg.n_agents):
                self._clear_agent(s, k, new_agents)
        s.agent_vel = new_agents - s.agent_pos
        s.agent_pos = new_agents
        s.obj_vel = s.obj_pos - old_obj
        if self.has_door:
            held = any(
                np.linalg.norm(new_agents[k] - self.handle_pos(state.slider)) < cfg.handle_radius for k in range(cfg.n_agents)
            )
            if held:
                slider = min(1.0, state.slider + cfg.open_rate)
            else:
                slider = max(0.0, state.slider - cfg.spring_rate)
            s.slider_vel = slider - state.slider
            s.slider = slider
        s.step = state.step + 1
        return s

    def _push_blocks(self, s, k, new_agents, moved):
        cfg = self.cfg
        contact = cfg.agent_radius + cfg.block_radius
        p = new_agents[k]
        for j in range(len(s.obj_pos)):
            d = s.obj_pos[j] - p
            dist = float(np.hypot(d[0], d[1]))
            if dist < contact:
                if dist < 1e-12:
                    motion = new_agents[k] - s.agent_pos[k]
                    n = motion / np.linalg.norm(motion) if np.linalg.norm(motion) > 0 else np.array([1.0, 0.0])
                else:
                    n = d / dist
                target = p + n * contact
                s.obj_pos[j] = self._constrain_block(s, j, s.obj_pos[j], target)
                moved[j] = True

    def _separate_blocks(self, s, moved):
        cfg = self.cfg
        dmin = 2.0 * cfg.block_radius
        n = len(s.obj_pos)
        for _ in range(4):
            clean = True
            for a in range(n):
                for b in range(a + 1, n):
                    d = s.obj_pos[b] - s.obj_pos[a]
                    dist = float(np.hypot(d[0], d[1]))
                    if dist >= dmin:
                        continue
                    clean = False
                    nrm = d / dist if dist > 1e-12 else np.array([1.0, 0.0])
                    if moved[a] and not moved[b]:
                        s.obj_pos[b] = self._constrain_block(s, b, s.obj_pos[b], s.obj_pos[a] + nrm * dmin)
                        moved[b] = True
                    elif moved[b] and not moved[a]:
                        s.obj_pos[a] = self._constrain_block(s, a, s.obj_pos[a], s.obj_pos[b] - nrm * dmin)
                        moved[a] = True
                    else:
                        c = 0.5 * (s.obj_pos[a] + s.obj_pos[b])
                        s.obj_pos[a] = self._constrain_block(s, a, s.obj_pos[a], c - nrm * 0.5 * dmin)
                        s.obj_pos[b] = self._constrain_block(s, b, s.obj_pos[b], c + nrm * 0.5 * dmin)
            if clean:
                break

    def _constrain_block(self, s, j, old, new):
        cfg = self.cfg
        r = cfg.block_radius
        new = np.clip(new, [-TABLE_HALF[0] + r, -TABLE_HALF[1] + r], [TABLE_HALF[0] - r, TABLE_HALF[1] - r])
        if not self.has_door:
            return new
        band = self._band()
        boxing = cfg.task == "push-box"
        if boxing and s.boxed[j]:
            return np.array([max(new[0], band), new[1]])
        old_in = abs(old[0]) < band
        crossing = (old[0] < 0) != (new[0] < 0)
        if old_in:
            # already in the doorway: may move along it but not through the wall
            out = np.array([new[0], min(max(new[1], -DOOR_HALF + r), DOOR_HALF - r)])
        elif abs(new[0]) < band or crossing:
            if self._passable(new[1], s.slider):
                out = new
            else:
                out = np.array([(-band if old[0] < 0 else band), new[1]])
        else:
            out = new
        if boxing and out[0] >= band:
            s.boxed[j] = True
        return out

    def _clear_agent(self, s, k, new_agents):
        cfg = self.cfg
        contact = cfg.agent_radius + cfg.block_radius
        for j in range(len(s.obj_pos)):
            d = new_agents[k] - s.obj_pos[j]
            dist = float(np.hypot(d[0], d[1]))
            if dist < contact - 1e-9:
                n = d / dist if dist > 1e-12 else np.array([1.0, 0.0])
                lo = np.array([-TABLE_HALF[0] + cfg.agent_radius, -TABLE_HALF[1] + cfg.agent_radius])
                new_agents[k] = np.clip(s.obj_pos[j] + n * contact, lo, -lo)

    def grip_assignment(self, agent_pos, ends):
        """Which bar end each agent holds (-1 for none)."""
        cfg = self.cfg
        held = []
        for p in agent_pos:
            d = np.linalg.norm(ends - p, axis=1)
            e = int(np.argmin(d))
            held.append(e if d[e] < cfg.grip_radius else -1)
        return held

    def _move_bar(self, s, new_agents):
        cfg = self.cfg
        held = self.grip_assignment(s.agent_pos, s.obj_pos)
        if sorted(held) != [0, 1]:
            return
        ends = s.obj_pos.copy()
        for k, e in enumerate(held):
            ends[e] = ends[e] + (new_agents[k] - s.agent_pos[k])
        c = 0.5 * (ends[0] + ends[1])
        d = ends[1] - ends[0]
        n = np.linalg.norm(d)
        u = d / n if n > 1e-12 else (s.obj_pos[1] - s.obj_pos[0]) / cfg.bar_length
        half = 0.5 * cfg.bar_length
        ends = np.stack([c - half * u, c + half * u])
        lim = np.array(TABLE_HALF)
        shift = np.zeros(2)
        for e in ends:
            over = np.abs(e) - lim
            for ax in range(2):
                if over[ax] > 0:
                    shift[ax] = -np.sign(e[ax]) * max(abs(shift[ax]), over[ax])
        s.obj_pos = ends + shift

    # -- reward -----------------------------------------------------------
    def goals_satisfied(self, achieved, desired):
        """Per-region goal satisfaction; regions without an object goal report False."""
        d = np.linalg.norm(np.asarray(achieved) - np.asarray(desired), axis=-1)
        return (d < self.cfg.success_radius) & self.goal_mask

    def success_from_goals(self, achieved, desired):
        achieved = np.asarray(achieved)
        desired = np.asarray(desired)
        r = self.cfg.success_radius
        d = np.linalg.norm(achieved - desired, axis=-1)
        ok = np.all((d < r) | ~self.goal_mask, axis=-1)
        if self.cfg.task == "adjust-bar" and self.cfg.bar_symmetric:
            swapped = desired[..., ::-1, :]
            ds = np.linalg.norm(achieved - swapped, axis=-1)
            ok = ok | np.all(ds < r, axis=-1)
        return ok

    def success(self, state=None):
        s = self.state if state is None else state
        return bool(self.success_from_goals(self.achieved_goals(s), s.goals))

    def compute_reward(self, achieved, desired, satisfied_before=None, door_newly_open=False):
        """Goal-dependent reward plus the door sub-goal; shared by all agents.

        ``satisfied_before`` marks regions whose sub-goal was already paid in
        this episode (informative mode only).
        """
        if self.cfg.reward_mode == "sparse":
            return 1.0 if bool(self.success_from_goals(achieved, desired)) else 0.0
        sat = self.goals_satisfied(achieved, desired)
        if satisfied_before is None:
            satisfied_before = np.zeros_like(sat)
        r = float(np.sum(sat & ~satisfied_before))
        if door_newly_open:
            r += 1.0
        return r

    def _score(self, prev, nxt):
        cfg = self.cfg
        achieved = self.achieved_goals(nxt)
        sat = self.goals_satisfied(achieved, nxt.goals)
        door_open = self.has_door and nxt.slider >= cfg.door_open_threshold
        door_new = bool(door_open and not prev.door_was_open)
        reward = self.compute_reward(achieved, nxt.goals, prev.satisfied, door_new and cfg.reward_mode == "informative")
        goal_free = 1.0 if (door_new and cfg.reward_mode == "informative") else 0.0
        nxt.satisfied = prev.satisfied | sat
        nxt.door_was_open = prev.door_was_open or door_open
        gap = self.gripper_distance(nxt)
        if cfg.collision_penalty and gap < cfg.collision_distance:
            reward -= 1.0
            goal_free -= 1.0
        info = {
            "is_success": bool(self.success_from_goals(achieved, nxt.goals)),
            "interacting": self.interacting(nxt),
            "gripper_distance": gap,
            "slider": nxt.slider,
            "goal_free_reward": goal_free,
            "achieved_goals": achieved,
        }
        return reward, info

    def gripper_distance(self, state=None):
        s = self.state if state is None else state
        if len(s.agent_pos) < 2:
            return math.inf
        return float(np.linalg.norm(s.agent_pos[0] - s.agent_pos[1]))

    def interacting(self, state=None):
        s = self.state if state is None else state
        pts = self.interaction_points(s)
        d = np.linalg.norm(s.agent_pos[:, None, :] - pts[None, :, :], axis=-1)
        return [bool(x) for x in (d < self.cfg.interaction_threshold).any(axis=1)]


def reset(cfg: EnvConfig, rng):
    """Functional form: build an environment, reset it, return ``(env, state, entities)``."""
    env = PlanarEnv(cfg)
    obs = env.reset(rng)
    return env, env.state, obs.entities(0)
