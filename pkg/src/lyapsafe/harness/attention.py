"""Attention-weight dumps for a checkpoint on a scripted or greedy trajectory.

A scenario file is YAML with ``map`` (a map file, relative to the scenario)
or ``env`` (GridSpec fields) plus ``map_seed``, then either ``actions`` (a
list of commanded actions) or ``steps`` (greedy rollout length), and an
optional ``seed`` for the environment dynamics.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from ..encoder import ATTENTION_COLUMNS, dump_attention
from ..errors import ConfigError, DimensionError
from ..gridworld import DISPLACEMENTS, GridSpec, GridWorld, load_map
from ..nn import no_grad
from ..nn.rng import RngStream
from ..sdqn import SafeAgent

__all__ = ["ATTENTION_COLUMNS", "Trajectory", "attention_weights", "dominant_keys", "dump_checkpoint_attention",
           "legal_actions", "load_scenario", "record_trajectory"]


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, *obs_shape) observations fed to the encoder
    aux: np.ndarray  # (T, aux_dim)
    actions: list  # action commanded at each step
    cells: list  # agent cell when each observation was taken
    spec: GridSpec


def load_scenario(path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError([f"scenario {path}: {err}"]) from err
    problems = []
    if ("map" in raw) == ("env" in raw):
        problems.append("scenario: give exactly one of 'map' or 'env'")
    if ("actions" in raw) == ("steps" in raw):
        problems.append("scenario: give exactly one of 'actions' or 'steps'")
    if problems:
        raise ConfigError(problems)
    if "map" in raw:
        raw["map"] = str((path.parent / raw["map"]).resolve()) if not Path(raw["map"]).is_absolute() else raw["map"]
    return raw


def scenario_env(scenario: dict) -> GridWorld:
    seed = int(scenario.get("seed", 0))
    if "map" in scenario:
        spec, _ = load_map(scenario["map"])
        return GridWorld(spec, seed=0, rng=RngStream(seed, "attention/dynamics"))
    spec = GridSpec(**scenario["env"])
    return GridWorld(spec, seed=int(scenario.get("map_seed", 0)), rng=RngStream(seed, "attention/dynamics"))


def record_trajectory(agent: SafeAgent, env: GridWorld, actions=None, steps: int | None = None) -> Trajectory:
    """Replay commanded ``actions`` (or act greedily for ``steps``) and keep the encoder inputs."""
    obs = env.reset()
    ctx = agent.begin_episode()
    prev = (-1, 0.0, 0.0)
    observations, auxs, taken, cells = [], [], [], []
    n = len(actions) if actions is not None else int(steps)
    for t in range(n):
        aux = agent.encoder.aux_features(prev[0], prev[1], prev[2])
        observations.append(obs)
        auxs.append(aux)
        cells.append(tuple(env.state.agent))
        if actions is not None:
            a = int(actions[t])
        else:
            a = agent.act(ctx, obs, aux)
        res = env.step(a)
        taken.append(a)
        prev = (a, res.cost, res.constraint_cost)
        obs = res.observation
        if res.terminal or res.truncated:
            break
    return Trajectory(np.stack(observations), np.stack(auxs), taken, cells, env.spec)


def attention_weights(agent: SafeAgent, traj: Trajectory) -> list:
    """Per-layer (1, H, T, T+1) attention weights of the online encoder over the trajectory."""
    if tuple(traj.spec.obs_shape()) != tuple(agent.enc_cfg.obs_shape):
        raise DimensionError(f"trajectory observations {traj.spec.obs_shape()} do not fit the checkpoint's "
                             f"encoder {tuple(agent.enc_cfg.obs_shape)}")
    keep: list = []
    with no_grad():
        agent.encoder.forward(agent.online, traj.observations[None], traj.aux[None], keep=keep)
    return keep


def dominant_keys(weights) -> np.ndarray:
    """(layers, heads, T) index of the highest-weight key step; -1 is the begin token."""
    return np.stack([np.argmax(np.asarray(w)[0], axis=-1) - 1 for w in weights])


def legal_actions(spec: GridSpec, cell) -> set:
    """Actions whose displacement keeps the agent inside the grid (staying is always legal)."""
    out = set()
    for a, (dr, dc) in enumerate(DISPLACEMENTS):
        if 0 <= cell[0] + dr < spec.height and 0 <= cell[1] + dc < spec.width:
            out.add(a)
    return out


def dump_checkpoint_attention(checkpoint, scenario, out_path) -> Path:
    agent = SafeAgent.load(checkpoint)
    sc = load_scenario(scenario) if not isinstance(scenario, dict) else scenario
    env = scenario_env(sc)
    traj = record_trajectory(agent, env, sc.get("actions"), sc.get("steps"))
    return dump_attention(out_path, attention_weights(agent, traj))
