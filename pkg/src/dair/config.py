"""Experiment configuration: YAML file, dotted overrides, validation, resolution.

Precedence is command line over file over built-in defaults. The resolved
form materialises every default so a written config re-parses to the same
experiment.
"""

from __future__ import annotations

import copy
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import __version__
from .dair_loss import DairConfig
from .envs.planar import TASKS, EnvConfig
from .sac.trainer import SACConfig

METHODS = ("dair", "attention", "mlp")
DEFAULT_LAMBDA = 0.05

# nominal sample budgets per curriculum stage, as (n_objects, env steps)
NOMINAL_STAGES = {
    "reach": [(1, 1_000_000)],
    "rearrange": [(1, 1_000_000), (2, 3_000_000), (3, 5_000_000)],
    "push-door": [(2, 10_000_000)],
    "push-box": [(2, 10_000_000)],
    "adjust-bar": [(2, 10_000_000)],
}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


@dataclass
class NetSection:
    embed_dim: int = 64


@dataclass
class CurriculumConfig:
    scale: float = 0.02
    stages: list | None = None  # [{"n_objects": m, "budget": nominal steps}]


@dataclass
class TrainSection:
    eval_every: int = 10_000
    eval_episodes: int = 10
    checkpoint_every: int = 0
    deterministic_eval: bool = True
    update_ratio: float = 1.0
    workers: int = 1


@dataclass
class ExperimentConfig:
    task: str
    method: str = "dair"
    env: EnvConfig = None
    dair: DairConfig = field(default_factory=DairConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    net: NetSection = field(default_factory=NetSection)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    train: TrainSection = field(default_factory=TrainSection)
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"

    @property
    def arch(self):
        return "mlp" if self.method == "mlp" else "attention"

    def stage_plan(self):
        """``[(n_objects, desk-scale env steps), ...]``."""
        return [(int(s["n_objects"]), int(round(s["budget"] * self.curriculum.scale))) for s in self.curriculum.stages]

    def total_steps(self):
        return sum(b for _, b in self.stage_plan())

    def env_for_stage(self, stage):
        return self.env.with_objects(self.stage_plan()[stage][0])

    def sac_config(self):
        return SACConfig(**{**asdict(self.sac), "embed_dim": self.net.embed_dim})

    def to_dict(self):
        env = asdict(self.env)
        env.pop("task")
        d = {
            "task": self.task,
            "method": self.method,
            "env": env,
            "dair": {
                "lambda": self.dair.lam,
                "apply_to_policy": self.dair.apply_to_policy,
                "apply_to_q": self.dair.apply_to_q,
                "detach_partner": self.dair.detach_partner,
            },
            "sac": {k: v for k, v in asdict(self.sac).items() if k != "embed_dim"},
            "net": asdict(self.net),
            "curriculum": {"scale": self.curriculum.scale, "stages": copy.deepcopy(self.curriculum.stages)},
            "train": asdict(self.train),
            "seeds": list(self.seeds),
            "out": self.out,
        }
        return d

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self):
        """Short stable hash of the resolved config, output location excluded."""
        d = self.to_dict()
        d.pop("out")
        d.pop("seeds")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTION_TYPES = {"env": EnvConfig, "sac": SACConfig, "net": NetSection, "curriculum": CurriculumConfig, "train": TrainSection}
_TOP_KEYS = ("task", "method", "env", "dair", "sac", "net", "curriculum", "train", "seeds", "out")
_DAIR_KEYS = ("lambda", "apply_to_policy", "apply_to_q", "detach_partner")


def _section_keys(name):
    keys = [f.name for f in fields(_SECTION_TYPES[name])]
    if name == "env":
        keys.remove("task")
    if name == "sac":
        keys.remove("embed_dim")
    return keys


def _check_keys(d, allowed, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be a mapping, got {type(d).__name__}", prefix.rstrip("."))
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown config key {prefix + str(k)!r}", prefix + str(k))


def from_dict(raw):
    """Validate a nested mapping and build an :class:`ExperimentConfig`."""
    raw = copy.deepcopy(raw) if raw is not None else {}
    _check_keys(raw, _TOP_KEYS, "")
    if "task" not in raw or raw["task"] is None:
        raise ConfigError("missing required key 'task'", "task")
    task = raw["task"]
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}", "task")
    method = raw.get("method", "dair")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}", "method")

    sections = {}
    for name in ("env", "sac", "net", "curriculum", "train"):
        sec = raw.get(name) or {}
        _check_keys(sec, _section_keys(name), name + ".")
        sections[name] = _coerce_numbers(sec, _SECTION_TYPES[name], name)
    dsec = raw.get("dair") or {}
    _check_keys(dsec, _DAIR_KEYS, "dair.")

    lam = dsec.get("lambda")
    if lam is None:
        lam = DEFAULT_LAMBDA if method == "dair" else 0.0
    lam = float(lam)
    if method == "dair" and not lam > 0:
        raise ConfigError(f"method 'dair' needs dair.lambda > 0, got {lam}", "dair.lambda")
    if method in ("attention", "mlp") and lam != 0.0:
        raise ConfigError(f"method {method!r} needs dair.lambda = 0, got {lam}", "dair.lambda")

    cur = dict(sections["curriculum"])
    stages = cur.get("stages")
    env_sec = dict(sections["env"])
    if stages is None:
        if task == "rearrange" and env_sec.get("n_objects") is not None:
            stages = [(int(env_sec["n_objects"]), NOMINAL_STAGES["rearrange"][-1][1])]
        else:
            stages = NOMINAL_STAGES[task]
        stages = [{"n_objects": m, "budget": b} for m, b in stages]
    stages = _validate_stages(stages)
    cur["stages"] = stages
    env_sec["n_objects"] = stages[0]["n_objects"]
    if method == "mlp" and len({s["n_objects"] for s in stages}) > 1:
        raise ConfigError("method 'mlp' has a fixed input width and cannot follow an object curriculum", "curriculum.stages")

    try:
        env = EnvConfig(task=task, **env_sec)
        for s in stages:
            env.with_objects(s["n_objects"])
        dair = DairConfig(
            lam=lam,
            apply_to_policy=bool(dsec.get("apply_to_policy", True)),
            apply_to_q=bool(dsec.get("apply_to_q", True)),
            detach_partner=bool(dsec.get("detach_partner", False)),
        )
        sac = SACConfig(**sections["sac"])
        net = NetSection(**sections["net"])
        curriculum = CurriculumConfig(**cur)
        train = TrainSection(**sections["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if curriculum.scale <= 0:
        raise ConfigError("curriculum.scale must be positive", "curriculum.scale")
    if train.eval_episodes < 0 or train.update_ratio < 0 or train.workers != 1:
        if train.workers != 1:
            raise ConfigError("only a single rollout worker is supported", "train.workers")
        raise ConfigError("train.eval_episodes and train.update_ratio must be non-negative", "train")
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError(f"seeds must be a non-empty list of non-negative integers, got {seeds!r}", "seeds")
    return ExperimentConfig(
        task=task,
        method=method,
        env=env,
        dair=dair,
        sac=sac,
        net=net,
        curriculum=curriculum,
        train=train,
        seeds=list(seeds),
        out=str(raw.get("out", "runs")),
    )


def _coerce_numbers(sec, cls, prefix):
    # YAML 1.1 reads "3e-4" as a string; float fields accept any numeric text
    defaults = {f.name: f.default for f in fields(cls)}
    out = dict(sec)
    for k, v in sec.items():
        if isinstance(defaults.get(k), float) and isinstance(v, str):
            try:
                out[k] = float(v)
            except ValueError:
                raise ConfigError(f"{prefix}.{k} must be a number, got {v!r}", f"{prefix}.{k}") from None
    return out


def _validate_stages(stages):
    if not isinstance(stages, list) or not stages:
        raise ConfigError("curriculum.stages must be a non-empty list", "curriculum.stages")
    out = []
    for k, s in enumerate(stages):
        if isinstance(s, (list, tuple)) and len(s) == 2:
            s = {"n_objects": s[0], "budget": s[1]}
        if not isinstance(s, dict) or set(s) != {"n_objects", "budget"}:
            raise ConfigError(f"curriculum.stages[{k}] needs exactly 'n_objects' and 'budget'", f"curriculum.stages[{k}]")
        if int(s["n_objects"]) < 1 or float(s["budget"]) < 0:
            raise ConfigError(f"curriculum.stages[{k}] has invalid values {s}", f"curriculum.stages[{k}]")
        out.append({"n_objects": int(s["n_objects"]), "budget": int(s["budget"])})
    return out


def parse_override(item):
    """``"a.b=value"`` to ``(["a", "b"], value)`` with YAML value typing."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, _, text = item.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(text) if text.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value of override {key!r}: {e}", key) from None
    return key.split("."), value


def apply_overrides(raw, overrides):
    raw = copy.deepcopy(raw) if raw else {}
    for item in overrides or ():
        path, value = parse_override(item)
        node = raw
        for depth, part in enumerate(path[:-1]):
            if part not in _TOP_KEYS[2:8] and depth == 0:
                raise ConfigError(f"unknown config key {'.'.join(path[: depth + 1])!r}", ".".join(path[: depth + 1]))
            node = node.setdefault(part, {})
            if node is None:
                node = raw[part] = {}
            if not isinstance(node, dict):
                raise ConfigError(f"config key {'.'.join(path[: depth + 1])!r} is not a section", ".".join(path))
        node[path[-1]] = value
    return raw


def load_config(path=None, overrides=(), base=None):
    """Read a YAML file (optional), apply dotted overrides and validate."""
    raw = dict(base or {})
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a mapping at top level")
        raw.update(loaded)
    return from_dict(apply_overrides(raw, overrides))


def manifest(cfg: ExperimentConfig, seed):
    return {
        "seed": int(seed),
        "package_version": __version__,
        "config_digest": cfg.digest(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "workers": cfg.train.workers,
    }
