"""Command line entry point: ``dair train|eval|replay|plot-data``.

Exit codes: 0 success, 1 bad input (config, files, incompatible
checkpoints), 2 runtime failure (for example a diverged loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
import yaml

from .checkpoint import CheckpointError
from .config import ConfigError, apply_overrides, from_dict, load_config, manifest
from .envs.trajectory import TrajectoryError, read_dump, write_dump
from .metrics import aggregate, format_table, write_plot_data, write_summary_csv
from .nets import IncompatibleEntityCount

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser():
    p = _Parser(prog="dair", description="Disentangled-attention multi-agent SAC experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one or more seeds of an experiment")
    t.add_argument("--config", help="YAML experiment config")
    t.add_argument("--seed", type=int, action="append", help="seed to run (repeatable); overrides config seeds")
    t.add_argument("--out", help="output directory (overrides config 'out')")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    t.add_argument("--resume", metavar="CKPT", help="continue a single seed from a checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint with frozen policies")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--objects", type=int, help="number of interaction regions to evaluate on")
    e.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="env.* override")
    e.add_argument("--seed", type=int, default=0)
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", dest="deterministic", action="store_true", default=True, help="act with the distribution mean (default)")
    mode.add_argument("--stochastic", dest="deterministic", action="store_false", help="sample actions")
    e.add_argument("--out", help="write the summary CSV here")
    e.add_argument("--dump", help="write a trajectory dump of the evaluated episodes")

    r = sub.add_parser("replay", help="turn a trajectory dump into plot data")
    r.add_argument("dump")
    r.add_argument("--out", required=True, help="output directory")

    d = sub.add_parser("plot-data", help="aggregate finished runs into summary and plot-data CSVs")
    d.add_argument("runs", nargs="+", metavar="[METHOD=]RUN_DIR", help="train output directories")
    d.add_argument("--out", required=True, help="output directory")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INPUT
    handler = {"train": cmd_train, "eval": cmd_eval, "replay": cmd_replay, "plot-data": cmd_plot_data}[args.command]
    try:
        return handler(args)
    except (ConfigError, CheckpointError, TrajectoryError, IncompatibleEntityCount, UsageError) as e:
        print(f"dair {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as e:
        print(f"dair {args.command}: error: {e.strerror}: {e.filename}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        print(f"dair {args.command}: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


# -- train ---------------------------------------------------------------------


def cmd_train(args):
    from .sac.loop import training_loop

    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out={args.out}")
    cfg = load_config(args.config, overrides)
    if args.seed:
        cfg.seeds = list(args.seed)
    if args.resume and len(cfg.seeds) != 1:
        raise UsageError("--resume continues exactly one seed; pass --seed")
    if args.resume and not os.path.exists(args.resume):
        raise UsageError(f"--resume checkpoint {args.resume!r} does not exist")
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "resolved_config.yaml"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_yaml())
    for seed in cfg.seeds:
        out_dir = os.path.join(cfg.out, f"seed_{seed}")
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest(cfg, seed), fh, indent=2, sort_keys=True)
            fh.write("\n")
        res = training_loop(cfg, seed, out_dir, resume=args.resume, log=lambda m: print(m, flush=True))
        if res.eval_rows:
            last = res.eval_rows[-1]
            print(f"seed {seed}: final eval success {last['success']:.1f}% after {res.state.env_steps} env steps")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def cmd_eval(args):
    from .sac.loop import evaluate, trainer_from_checkpoint

    if args.episodes < 1:
        raise UsageError(f"--episodes must be at least 1, got {args.episodes}")
    state, meta = trainer_from_checkpoint(args.checkpoint, policies_only=True)
    bad = [o for o in args.overrides if not o.startswith("env.")]
    if bad:
        raise UsageError(f"eval only accepts env.* overrides, got {bad[0]!r}")
    raw = apply_overrides(meta["config"], args.overrides)
    cfg = from_dict(raw)
    m = args.objects if args.objects is not None else cfg.stage_plan()[-1][0]
    try:
        env_cfg = cfg.env.with_objects(m)
    except ValueError as e:
        raise UsageError(str(e)) from None
    rng = np.random.default_rng(args.seed)
    results = evaluate(state, env_cfg, args.episodes, rng, deterministic=args.deterministic, record=bool(args.dump))
    summary = aggregate({cfg.method: [[r.metrics for r in results]]})
    print(f"{cfg.task} M={m} episodes={args.episodes} method={cfg.method}")
    print(format_table(summary))
    if args.out:
        write_summary_csv(summary, args.out)
    if args.dump:
        header = {
            "task": cfg.task,
            "method": cfg.method,
            "n_agents": env_cfg.n_agents,
            "n_entities": env_cfg.n_agents + env_cfg.n_objects,
            "checkpoint": os.path.basename(args.checkpoint),
        }
        steps = ({**s, "episode": i} for i, r in enumerate(results) for s in r.trace)
        write_dump(args.dump, header, steps)
    return EXIT_OK


# -- replay --------------------------------------------------------------------


def cmd_replay(args):
    header, steps = read_dump(args.dump)
    os.makedirs(args.out, exist_ok=True)
    n_entities = header.get("n_entities")
    if n_entities is None and steps and steps[0].get("alpha"):
        n_entities = len(steps[0]["alpha"][0])
    n_entities = int(n_entities or 0)
    with open(os.path.join(args.out, "alpha_heatmap.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "step", "agent"] + [f"entity_{j}" for j in range(n_entities)])
        for s in steps:
            for i, row in enumerate(s.get("alpha") or ()):
                w.writerow([s.get("episode", 0), s["step"], i] + [repr(float(x)) for x in row])
    with open(os.path.join(args.out, "trajectory.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "step", "kind", "index", "x", "y"])
        for s in steps:
            for kind in ("agents", "objects"):
                for i, (x, y) in enumerate(s[kind]):
                    w.writerow([s.get("episode", 0), s["step"], kind[:-1], i, repr(float(x)), repr(float(y))])
    print(f"wrote plot data for {len(steps)} steps to {args.out}")
    return EXIT_OK


# -- plot-data -----------------------------------------------------------------


def final_eval_rows(run_dir):
    """Last evaluation row of every ``seed_*`` directory under ``run_dir``."""
    rows = []
    if not os.path.isdir(run_dir):
        raise UsageError(f"run directory {run_dir!r} does not exist")
    for name in sorted(os.listdir(run_dir)):
        path = os.path.join(run_dir, name, "eval.csv")
        if not (name.startswith("seed_") and os.path.exists(path)):
            continue
        with open(path, newline="") as fh:
            data = list(csv.DictReader(fh))
        if data:
            rows.append({k: float(v) for k, v in data[-1].items()})
    if not rows:
        raise UsageError(f"no evaluated seeds found under {run_dir!r}")
    return rows


def cmd_plot_data(args):
    runs = {}
    for item in args.runs:
        method, sep, path = item.partition("=")
        if not sep:
            path = item
            with open(os.path.join(path, "resolved_config.yaml"), encoding="utf-8") as fh:
                method = yaml.safe_load(fh)["method"]
        # eval rows already hold per-seed means; success is stored in percent
        seeds = [[{**r, "success": r["success"] / 100.0}] for r in final_eval_rows(path)]
        runs.setdefault(method, []).extend(seeds)
    summary = aggregate(runs)
    os.makedirs(args.out, exist_ok=True)
    write_summary_csv(summary, os.path.join(args.out, "summary.csv"))
    write_plot_data(summary, os.path.join(args.out, "plot_data.csv"))
    print(format_table(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
