"""Desk-scale experiment protocol behind the acceptance suite.

Every named run is a config mapping plus a list of seeds. ``main``
trains whatever is not yet in the cache and writes a ``final.json`` per seed
holding a frozen-policy evaluation of the last checkpoint. Cache entries are
keyed by run name and config digest, so editing a protocol setting starts a
fresh entry instead of reusing stale results.

Run it with ``python -m dair.experiments [--cache DIR] [NAME ...]``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .config import from_dict
from .sac.loop import evaluate, training_loop

DEFAULT_CACHE = "acceptance_cache"
SEEDS = (0, 1, 2)
FINAL_EVAL_EPISODES = 50

# shared desk-scale settings; budgets come from curriculum.scale
DESK = {
    "sac": {"batch_size": 64, "lr": 1e-3},
    "net": {"embed_dim": 32},
    "train": {"eval_every": 20_000, "eval_episodes": 20, "update_ratio": 0.25},
}
TWO_OBJECT_SCALE = 0.006  # 10M nominal steps -> 60k
CURRICULUM_SCALE = 0.01  # 1M/3M/5M -> 10k/30k/50k


def _raw(task, method, scale, **extra):
    raw = {"task": task, "method": method, "curriculum": {"scale": scale}}
    for k, v in DESK.items():
        raw[k] = dict(v)
    for section, values in extra.items():
        raw.setdefault(section, {}).update(values)
    return raw


def _door(method, **extra):
    return _raw("push-door", method, TWO_OBJECT_SCALE, **extra)


RUNS = {
    "reach": (_raw("reach", "attention", 0.05), SEEDS),
    "door-dair": (_door("dair"), SEEDS),
    "door-attention": (_door("attention"), SEEDS),
    "box-dair": (_raw("push-box", "dair", TWO_OBJECT_SCALE), SEEDS),
    "box-attention": (_raw("push-box", "attention", TWO_OBJECT_SCALE), SEEDS),
    "door-penalty-dair": (_door("dair", env={"collision_penalty": True}), SEEDS),
    "door-penalty-attention": (_door("attention", env={"collision_penalty": True}), SEEDS),
    "bar-dair": (_raw("adjust-bar", "dair", TWO_OBJECT_SCALE), SEEDS),
    "bar-attention": (_raw("adjust-bar", "attention", TWO_OBJECT_SCALE), SEEDS),
    "door-lambda-0.02": (_door("dair", dair={"lambda": 0.02}), SEEDS),
    "door-lambda-0.2": (_door("dair", dair={"lambda": 0.2}), SEEDS),
    "rearrange-curriculum": (_raw("rearrange", "dair", CURRICULUM_SCALE), (0,)),
}
# extra object counts evaluated after training, per run
GENERALIZATION = {"rearrange-curriculum": (3, 4, 8)}


def run_dir(cache, name):
    cfg = from_dict(RUNS[name][0])
    return os.path.join(cache, f"{name}-{cfg.digest()}")


def result_path(cache, name, seed):
    return os.path.join(run_dir(cache, name), f"seed_{seed}", "final.json")


def load_results(cache, name):
    """``final.json`` contents of every finished seed of ``name``."""
    out = []
    for seed in RUNS[name][1]:
        path = result_path(cache, name, seed)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                out.append(json.load(fh))
    return out


def _summarise(results):
    ms = [r.metrics for r in results]
    overlaps = np.asarray([m.overlap for m in ms])
    return {
        "episodes": len(ms),
        "success": 100.0 * float(np.mean([m.success for m in ms])),
        "domination_rate": float(np.mean([m.domination_rate for m in ms])),
        "conflict_rate": float(np.mean([m.conflict_rate for m in ms])),
        "finish_steps": float(np.mean([m.finish_steps for m in ms])),
        "overlap": float(np.nanmean(overlaps)) if not np.all(np.isnan(overlaps)) else float("nan"),
    }


def run_one(cache, name, seed, log=print):
    raw, _ = RUNS[name]
    cfg = from_dict(raw)
    out_dir = os.path.join(run_dir(cache, name), f"seed_{seed}")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(run_dir(cache, name), "resolved_config.yaml"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_yaml())
    t0 = time.process_time()
    w0 = time.time()
    res = training_loop(cfg, seed, out_dir, log=lambda m: log(f"[{name}] {m}"))
    cpu = time.process_time() - t0
    rng = np.random.default_rng(10_000 + seed)
    final = {
        "name": name,
        "seed": seed,
        "task": cfg.task,
        "method": cfg.method,
        "lambda": cfg.dair.lam,
        "env_steps": res.state.env_steps,
        "updates": res.state.updates,
        "cpu_seconds": cpu,
        "wall_seconds": time.time() - w0,
        "eval_curve": [{"env_steps": r["env_steps"], "success": r["success"]} for r in res.eval_rows],
    }
    counts = GENERALIZATION.get(name, (cfg.stage_plan()[-1][0],))
    final["by_objects"] = {}
    for m in counts:
        env_cfg = cfg.env.with_objects(m)
        final["by_objects"][str(m)] = _summarise(evaluate(res.state, env_cfg, FINAL_EVAL_EPISODES, rng))
    final.update(final["by_objects"][str(counts[0])])
    tmp = result_path(cache, name, seed) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(final, fh, indent=2, sort_keys=True)
    os.replace(tmp, result_path(cache, name, seed))
    log(f"[{name}] seed {seed} done: success {final['success']:.1f}% in {cpu / 60:.1f} CPU min")
    return final


def pending(cache, names=None):
    """``(name, seed)`` pairs without results, seed-major so partial caches stay balanced."""
    names = list(names or RUNS)
    todo = []
    for k in range(max(len(RUNS[n][1]) for n in names)):
        for n in names:
            seeds = RUNS[n][1]
            if k < len(seeds) and not os.path.exists(result_path(cache, n, seeds[k])):
                todo.append((n, seeds[k]))
    return todo


def main(argv=None):
    p = argparse.ArgumentParser(prog="python -m dair.experiments", description=__doc__.split("\n\n")[0])
    p.add_argument("names", nargs="*", help=f"runs to fill (default: all of {', '.join(RUNS)})")
    p.add_argument("--cache", default=os.environ.get("DAIR_ACCEPTANCE_CACHE", DEFAULT_CACHE))
    p.add_argument("--list", action="store_true", help="print pending runs and exit")
    args = p.parse_args(argv)
    unknown = [n for n in args.names if n not in RUNS]
    if unknown:
        p.error(f"unknown run names {unknown}")
    todo = pending(args.cache, args.names)
    if args.list:
        for n, s in todo:
            print(f"{n} seed {s}")
        return 0
    for n, s in todo:
        run_one(args.cache, n, s, log=lambda m: print(m, flush=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
