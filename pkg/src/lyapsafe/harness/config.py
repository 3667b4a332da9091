"""Declarative experiment configuration.

A config is a YAML mapping with sections ``env``, ``encoder``, ``ensemble`` and
``train`` plus top-level ``name``, ``seeds``, ``map_seed``, ``eval_episodes``,
``out_dir``, ``record_wallclock`` and an optional ``sweep`` (dotted key -> list
of values, one sub-run per value). ``--set a.b=value`` overrides parse
``value`` as YAML.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from ..encoder import EncoderConfig
from ..errors import ConfigError, LyapsafeError
from ..gridworld import GridSpec
from ..safety import EnsembleConfig
from ..sdqn.config import TrainConfig

TOP_KEYS = {"name", "seeds", "map_seed", "eval_episodes", "out_dir", "record_wallclock", "sweep", "env", "encoder",
            "ensemble", "train"}
# encoder fields derived from the environment
DERIVED_ENCODER = {"obs_mode", "obs_shape", "n_actions"}


@dataclass
class ExperimentConfig:
    env: GridSpec
    encoder: EncoderConfig
    ensemble: EnsembleConfig
    train: TrainConfig
    seeds: list = field(default_factory=lambda: [0])
    name: str = "experiment"
    map_seed: int | None = None  # default: the training seed
    eval_episodes: int = 100
    out_dir: str = "runs"
    record_wallclock: bool = False
    sweep: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Every field materialised, in a form that loads back to an equal config."""
        enc = {k: v for k, v in dataclasses.asdict(self.encoder).items() if k not in DERIVED_ENCODER}
        return _plain({
            "name": self.name, "seeds": list(self.seeds), "map_seed": self.map_seed,
            "eval_episodes": self.eval_episodes, "out_dir": self.out_dir, "record_wallclock": self.record_wallclock,
            "sweep": dict(self.sweep), "env": dataclasses.asdict(self.env), "encoder": enc,
            "ensemble": dataclasses.asdict(self.ensemble), "train": dataclasses.asdict(self.train),
        })

    def seed_map(self, seed: int) -> int:
        return seed if self.map_seed is None else int(self.map_seed)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _fields(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form key=value"])
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if cur.get(p) is None:
            cur[p] = {}
        cur = cur[p]
        if not isinstance(cur, dict):
            raise ConfigError([f"cannot set {key!r}: {p!r} is not a section"])
    cur[parts[-1]] = value


def _build(cls, section: str, values: dict, problems: list, fixed: dict | None = None):
    unknown = set(values) - _fields(cls) - (DERIVED_ENCODER if cls is EncoderConfig else set())
    for k in sorted(unknown):
        problems.append(f"{section}.{k}: unknown field")
    kwargs = {k: v for k, v in values.items() if k in _fields(cls)}
    kwargs.update(fixed or {})
    try:
        return cls(**kwargs)
    except ConfigError as err:
        problems.extend(err.problems)
    except (LyapsafeError, TypeError, ValueError) as err:
        problems.append(f"{section}: {err}")
    return None


def from_dict(raw: dict) -> ExperimentConfig:
    """Validate and build; every violated field is reported in one :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a mapping"])
    problems = [f"{k}: unknown top-level key" for k in sorted(set(raw) - TOP_KEYS)]
    for sec in ("env", "encoder", "ensemble", "train"):
        if raw.get(sec) is not None and not isinstance(raw[sec], dict):
            problems.append(f"{sec}: must be a mapping")
    if problems:
        raise ConfigError(problems)
    env = _build(GridSpec, "env", raw.get("env") or {}, problems)
    fixed = {}
    if env is not None:
        fixed = {"obs_mode": env.obs_mode, "obs_shape": env.obs_shape(), "n_actions": 5}
    encoder = _build(EncoderConfig, "encoder", raw.get("encoder") or {}, problems, fixed)
    ensemble = _build(EnsembleConfig, "ensemble", raw.get("ensemble") or {}, problems)
    train = _build(TrainConfig, "train", raw.get("train") or {}, problems)
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        problems.append("seeds: must be a non-empty list of integers")
    eval_episodes = raw.get("eval_episodes", 100)
    if not isinstance(eval_episodes, int) or eval_episodes < 2:
        problems.append("eval_episodes: must be an integer >= 2")
    sweep = raw.get("sweep") or {}
    if not isinstance(sweep, dict):
        problems.append("sweep: must map dotted keys to lists of values")
    else:
        for k, vals in sweep.items():
            if not isinstance(vals, list) or not vals:
                problems.append(f"sweep.{k}: must be a non-empty list")
            elif k.split(".")[0] not in ("env", "encoder", "ensemble", "train"):
                problems.append(f"sweep.{k}: must address a field inside env, encoder, ensemble or train")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(env, encoder, ensemble, train, list(seeds), str(raw.get("name", "experiment")),
                            raw.get("map_seed"), eval_episodes, str(raw.get("out_dir", "runs")),
                            bool(raw.get("record_wallclock", False)), dict(sweep))


def reference_config_path(name: str) -> Path:
    """Path of a shipped reference config by file stem (e.g. ``smoke``)."""
    p = resources.files("lyapsafe").joinpath("configs", f"{name}.yaml")
    return Path(str(p))


def reference_config_names() -> list[str]:
    d = Path(str(resources.files("lyapsafe").joinpath("configs")))
    return sorted(p.stem for p in d.glob("*.yaml"))


def load_raw(path) -> dict:
    p = Path(path)
    if not p.exists() and not p.suffix:
        p = reference_config_path(str(path))
    if not p.exists():
        raise ConfigError([f"config file {path} not found"])
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as err:
        raise ConfigError([f"{p}: YAML parse error: {err}"]) from err
    return data or {}


def load_config(path, overrides=()) -> ExperimentConfig:
    raw = copy.deepcopy(load_raw(path))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_dotted(raw, key, value)
    return from_dict(raw)


def sweep_points(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """``(label, config)`` per sweep value; a single unlabelled point without a sweep."""
    if not cfg.sweep:
        return [("", cfg)]
    if len(cfg.sweep) != 1:
        raise ConfigError(["sweep: exactly one swept key is supported"])
    key, values = next(iter(cfg.sweep.items()))
    out = []
    base = cfg.to_dict()
    base["sweep"] = {}
    for v in values:
        raw = copy.deepcopy(base)
        set_dotted(raw, key, v)
        out.append((f"{key.split('.')[-1]}={v}", from_dict(raw)))
    return out


def write_manifest(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None))
    return path
