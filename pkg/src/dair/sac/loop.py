"""Rollout collection, evaluation and the curriculum training loop."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from ..envs.planar import PlanarEnv
from ..metrics import episode_metrics
from .buffer import Episode, ReplayBuffer, her_relabel
from .trainer import (
    SACConfig,
    TrainingDiverged,
    act,
    build_trainer,
    load_state_arrays,
    state_arrays,
    train_step,
)

METRIC_COLUMNS = (
    "episode",
    "stage",
    "n_objects",
    "env_steps",
    "updates",
    "success",
    "domination_rate",
    "conflict_rate",
    "finish_steps",
    "overlap",
    "critic_loss",
    "actor_loss",
    "q_overlap",
    "pi_overlap",
)
EVAL_COLUMNS = (
    "env_steps",
    "stage",
    "n_objects",
    "episodes",
    "success",
    "domination_rate",
    "conflict_rate",
    "finish_steps",
    "overlap",
)
STREAMS = ("init", "env", "act", "update", "her", "eval")


@dataclass
class RolloutResult:
    episode: Episode
    metrics: object
    trace: list | None = None


def rollout(envs, state, env_rng, act_rng, deterministic=False, record=False):
    """Run one episode in each environment in lockstep.

    Policies act on all live environments as one batch; an environment drops
    out when it reports done. Returns one :class:`RolloutResult` per env.
    """
    obs = [env.reset(env_rng) for env in envs]
    K = len(envs)
    cols = {k: [[] for _ in range(K)] for k in ("agents", "regions", "goals", "actions", "rewards", "next_agents",
                                                 "next_regions", "achieved", "goal_free", "done")}
    flags = [[] for _ in range(K)]
    gaps = [[] for _ in range(K)]
    alpha_steps = [[] for _ in range(K)]
    traces = [[] for _ in range(K)] if record else None
    success_step = [None] * K
    live = list(range(K))
    while live:
        agents = np.stack([obs[k].agents for k in live])
        regions = np.stack([obs[k].regions for k in live])
        actions, alphas = act(state, agents, regions, act_rng, deterministic)
        still = []
        for row, k in enumerate(live):
            env = envs[k]
            goals = env.state.goals.copy()
            nxt, reward, done, info = env.step(actions[row])
            c = cols
            c["agents"][k].append(obs[k].agents)
            c["regions"][k].append(obs[k].regions[:, :4])
            c["goals"][k].append(goals)
            c["actions"][k].append(actions[row])
            c["rewards"][k].append(reward)
            c["next_agents"][k].append(nxt.agents)
            c["next_regions"][k].append(nxt.regions[:, :4])
            c["achieved"][k].append(info["achieved_goals"])
            c["goal_free"][k].append(info["goal_free_reward"])
            c["done"][k].append(info["is_success"])
            flags[k].append(info["interacting"])
            gaps[k].append(info["gripper_distance"])
            step_alpha = None if alphas[0] is None else [a[row] for a in alphas]
            if step_alpha is not None:
                alpha_steps[k].append(step_alpha)
            if record:
                traces[k].append(
                    {
                        "step": env.state.step,
                        "agents": env.state.agent_pos.copy(),
                        "objects": info["achieved_goals"],
                        "alpha": None if step_alpha is None else np.stack(step_alpha),
                        "reward": reward,
                    }
                )
            if info["is_success"] and success_step[k] is None:
                success_step[k] = env.state.step
            obs[k] = nxt
            if not done:
                still.append(k)
        live = still
    out = []
    for k, env in enumerate(envs):
        T = len(cols["rewards"][k])
        ep = Episode(
            agents=np.asarray(cols["agents"][k]),
            regions=np.asarray(cols["regions"][k]),
            goals=np.asarray(cols["goals"][k]),
            actions=np.asarray(cols["actions"][k]),
            rewards=np.asarray(cols["rewards"][k], dtype=np.float64),
            next_agents=np.asarray(cols["next_agents"][k]),
            next_regions=np.asarray(cols["next_regions"][k]),
            achieved=np.asarray(cols["achieved"][k]),
            goal_free=np.asarray(cols["goal_free"][k], dtype=np.float64),
            done=np.asarray(cols["done"][k], dtype=bool),
            her_source=np.arange(T),
            her_future=-np.ones(T, dtype=np.int64),
        )
        per_agent = np.asarray(flags[k], dtype=bool).T
        m = episode_metrics(
            per_agent,
            gaps[k],
            success_step[k],
            env.cfg.horizon,
            env.cfg.conflict_threshold,
            alpha_steps[k] if len(alpha_steps[k]) and len(alpha_steps[k][0]) == 2 else None,
        )
        out.append(RolloutResult(ep, m, traces[k] if record else None))
    return out


def evaluate(state, env_cfg, episodes, rng, deterministic=True, record=False, batch=10):
    """Frozen-policy rollouts; returns the list of :class:`RolloutResult`."""
    if episodes < 1:
        raise ValueError(f"evaluation needs at least one episode, got {episodes}")
    results = []
    while len(results) < episodes:
        k = min(batch, episodes - len(results))
        envs = [PlanarEnv(env_cfg) for _ in range(k)]
        results.extend(rollout(envs, state, rng, rng, deterministic, record))
    return results


def curriculum_advance(state, buffer, plan):
    """Move to the next stage: flush the buffer and return the new object count.

    Past the final stage this is a no-op returning None. Network parameters
    are untouched; the shared region encoder absorbs the extra entity.
    """
    if state.stage >= len(plan) - 1:
        return None
    state.stage += 1
    buffer.clear()
    return plan[state.stage][0]


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


@dataclass
class TrainResult:
    state: object
    rows: list = field(default_factory=list)
    eval_rows: list = field(default_factory=list)
    out_dir: str | None = None


def trainer_meta(cfg, state, seed, stage_steps, rngs, marks):
    return {
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seed": int(seed),
        "arch": state.arch,
        "n_agents": state.n_agents,
        "n_regions": state.n_regions,
        "embed_dim": state.cfg.embed_dim,
        "env_steps": state.env_steps,
        "updates": state.updates,
        "episodes": state.episodes,
        "stage": state.stage,
        "stage_steps": int(stage_steps),
        "rng": {k: r.bit_generator.state for k, r in rngs.items()},
        "marks": marks,
    }


def trainer_from_checkpoint(path, policies_only=False):
    """Rebuild a :class:`TrainerState` and return ``(state, meta)``."""
    from ..config import from_dict

    arrays, meta = load_checkpoint(path)
    cfg = from_dict(meta["config"])
    state = build_trainer(meta["n_agents"], cfg.sac_config(), np.random.default_rng(0), meta["arch"], meta["n_regions"])
    load_state_arrays(state, arrays, policies_only=policies_only)
    for k in ("env_steps", "updates", "episodes", "stage"):
        setattr(state, k, int(meta[k]))
    return state, meta


def training_loop(cfg, seed, out_dir=None, resume=None, log=None):
    """Train one seed of ``cfg`` and return a :class:`TrainResult`.

    With ``out_dir`` the loop streams ``metrics.csv`` (one row per training
    episode) and ``eval.csv`` (one row per evaluation), and writes
    checkpoints under ``checkpoints/``. A non-finite loss aborts the run after
    saving the offending batch to ``diverged_batch.npz``.
    """
    sac: SACConfig = cfg.sac_config()
    plan = cfg.stage_plan()
    rngs = dict(zip(STREAMS, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(STREAMS)))))
    env_cfg0 = cfg.env_for_stage(0)
    state = build_trainer(env_cfg0.n_agents, sac, rngs["init"], cfg.arch, env_cfg0.n_regions)
    stage_steps = 0
    marks = {"eval": cfg.train.eval_every, "ckpt": cfg.train.checkpoint_every}
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        if meta.get("config_digest") != cfg.digest() or meta["seed"] != seed:
            raise CheckpointError(f"checkpoint {resume} was written by a different config or seed")
        load_state_arrays(state, arrays)
        for k in ("env_steps", "updates", "episodes", "stage"):
            setattr(state, k, int(meta[k]))
        stage_steps = int(meta["stage_steps"])
        for k, r in rngs.items():
            r.bit_generator.state = meta["rng"][k]
        marks = dict(meta["marks"])
    buffer = ReplayBuffer(sac.buffer_size)
    result = TrainResult(state=state, out_dir=out_dir)
    writers = _open_outputs(out_dir, state.n_agents, append=resume is not None)
    n_envs = sac.episodes_per_collection

    def evaluate_now():
        if cfg.train.eval_episodes == 0:
            return
        env_cfg = cfg.env_for_stage(state.stage)
        res = evaluate(state, env_cfg, cfg.train.eval_episodes, rngs["eval"], cfg.train.deterministic_eval)
        ms = [r.metrics for r in res]
        row = {
            "env_steps": state.env_steps,
            "stage": state.stage,
            "n_objects": env_cfg.n_objects,
            "episodes": len(ms),
            "success": 100.0 * np.mean([m.success for m in ms]),
            "domination_rate": np.mean([m.domination_rate for m in ms]),
            "conflict_rate": np.mean([m.conflict_rate for m in ms]),
            "finish_steps": np.mean([m.finish_steps for m in ms]),
            "overlap": np.mean([m.overlap for m in ms]) if cfg.arch == "attention" else float("nan"),
        }
        result.eval_rows.append(row)
        if writers:
            writers["eval"].writerow([_fmt(row[c]) for c in EVAL_COLUMNS])
            writers["eval_fh"].flush()
        if log:
            log(f"seed {seed} step {state.env_steps}: eval success {row['success']:.1f}%")

    def checkpoint(name):
        if not out_dir:
            return
        save_checkpoint(
            os.path.join(out_dir, "checkpoints", name),
            state_arrays(state),
            trainer_meta(cfg, state, seed, stage_steps, rngs, marks),
        )

    try:
        while True:
            if stage_steps >= plan[state.stage][1]:
                if curriculum_advance(state, buffer, plan) is None:
                    break
                stage_steps = 0
                continue
            env_cfg = cfg.env_for_stage(state.stage)
            envs = [PlanarEnv(env_cfg) for _ in range(n_envs)]
            results = rollout(envs, state, rngs["env"], rngs["act"])
            collected = 0
            for r in results:
                buffer.add_episode(her_relabel(r.episode, envs[0], sac.her_k, rngs["her"]))
                collected += len(r.episode)
            state.env_steps += collected
            stage_steps += collected
            G = sac.updates_per_collection
            if G is None:
                G = int(round(cfg.train.update_ratio * collected))
            losses = {}
            for _ in range(G):
                out = train_step(buffer, state, cfg.dair, rngs["update"])
                if out is None:
                    break
                losses = out
            for r in results:
                state.episodes += 1
                m = r.metrics
                row = {
                    "episode": state.episodes,
                    "stage": state.stage,
                    "n_objects": env_cfg.n_objects,
                    "env_steps": state.env_steps,
                    "updates": state.updates,
                    "success": m.success,
                    "domination_rate": m.domination_rate,
                    "conflict_rate": m.conflict_rate,
                    "finish_steps": m.finish_steps,
                    "overlap": m.overlap,
                    **{k: losses.get(k, float("nan")) for k in ("critic_loss", "actor_loss", "q_overlap", "pi_overlap")},
                }
                for i, tau in enumerate(state.taus()):
                    row[f"tau_{i}"] = tau
                result.rows.append(row)
                if writers:
                    writers["metrics"].writerow([_fmt(v) for v in row.values()])
            if writers:
                writers["metrics_fh"].flush()
            if cfg.train.eval_every and state.env_steps >= marks["eval"]:
                evaluate_now()
                while marks["eval"] <= state.env_steps:
                    marks["eval"] += cfg.train.eval_every
            if cfg.train.checkpoint_every and state.env_steps >= marks["ckpt"]:
                checkpoint(f"step_{state.env_steps:09d}.ckpt")
                while marks["ckpt"] <= state.env_steps:
                    marks["ckpt"] += cfg.train.checkpoint_every
        if not result.eval_rows or result.eval_rows[-1]["env_steps"] != state.env_steps:
            evaluate_now()
        checkpoint("final.ckpt")
    except TrainingDiverged as e:
        if out_dir and e.batch is not None:
            path = os.path.join(out_dir, "diverged_batch.npz")
            np.savez(path, **asdict(e.batch))
            raise TrainingDiverged(f"{e} at update {state.updates}; batch saved to {path}", e.batch) from None
        raise
    finally:
        if writers:
            writers["metrics_fh"].close()
            writers["eval_fh"].close()
    return result


def _open_outputs(out_dir, n_agents, append=False):
    if not out_dir:
        return None
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    mode = "a" if append else "w"
    mfh = open(os.path.join(out_dir, "metrics.csv"), mode, newline="")
    efh = open(os.path.join(out_dir, "eval.csv"), mode, newline="")
    mw = csv.writer(mfh, lineterminator="\n")
    ew = csv.writer(efh, lineterminator="\n")
    # appending to a fresh directory still needs headers
    if mfh.tell() == 0:
        mw.writerow(list(METRIC_COLUMNS) + [f"tau_{i}" for i in range(n_agents)])
    if efh.tell() == 0:
        ew.writerow(EVAL_COLUMNS)
    return {"metrics": mw, "metrics_fh": mfh, "eval": ew, "eval_fh": efh}
