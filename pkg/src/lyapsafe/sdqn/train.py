"""Outer training loop and per-episode metrics."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import NumericError
from ..gridworld import GridWorld
from ..nn.rng import RngStream
from .agent import SafeAgent
from .replay import Episode, PrioritizedReplay

METRIC_COLUMNS = ("iteration", "episode", "return", "cum_constraint_cost", "epsilon_tilde", "loss_q", "loss_qd",
                  "loss_qt", "loss_pcv", "violation_rate", "wallclock_s")


@dataclass
class Rollout:
    episode: Episode
    ret: float
    constraint: float
    eps_tilde: float
    reached_goal: bool


@dataclass
class TrainResult:
    agent: SafeAgent
    buffer: PrioritizedReplay
    metrics: list = field(default_factory=list)
    buffer_sizes: list = field(default_factory=list)
    timings: list = field(default_factory=list)


def run_episode(agent: SafeAgent, env: GridWorld, explore: float = 0.0, sample: bool = False, rng=None,
                mc_rng=None, episode: int = 0) -> Rollout:
    """Roll out one episode with the agent's shielded projected policy."""
    obs = env.reset()
    ctx = agent.begin_episode()
    observations, actions, costs, cons = [obs], [], [], []
    prev = (-1, 0.0, 0.0)
    terminal = reached = False
    while True:
        aux = agent.encoder.aux_features(prev[0], prev[1], prev[2])
        a = agent.act(ctx, obs, aux, explore, sample, rng, mc_rng, episode)
        res = env.step(a)
        actions.append(a)
        costs.append(res.cost)
        cons.append(res.constraint_cost)
        obs = res.observation
        observations.append(obs)
        prev = (a, res.cost, res.constraint_cost)
        if res.terminal or res.truncated:
            terminal, reached = res.terminal, res.reward_event
            break
    enc = None
    if agent.cfg.stale_encodings:
        agent.encode_step(ctx, obs, agent.encoder.aux_features(prev[0], prev[1], prev[2]))
        enc = np.stack(ctx.encodings)
    ep = Episode(np.stack(observations), actions, costs, cons, terminal, enc)
    return Rollout(ep, -float(np.sum(costs)), float(np.sum(cons)), float(ctx.eps_tilde), reached)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics(path, rows, columns=METRIC_COLUMNS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    return path


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: (float(v) if v not in ("", None) else None) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(agent: SafeAgent, env: GridWorld, seed: int = 0, out_dir=None, record_wallclock: bool = False,
          on_iteration=None) -> TrainResult:
    """Run ``agent.cfg.iterations`` iterations: collect episodes, fit, sync targets, refresh the baseline.

    Targets are copied after every ``target_sync``-th iteration (1-based) and the
    baseline after every ``baseline_refresh``-th. Any non-finite metric stops the
    run with a diagnostic checkpoint in ``out_dir / "diagnostic"``.
    """
    cfg = agent.cfg
    buffer = PrioritizedReplay(cfg.capacity, cfg.per_alpha, cfg.per_floor, cfg.prioritized)
    explore_rng = RngStream(seed, "sdqn/explore")
    mc_rng = RngStream(seed, "sdqn/mc")
    replay_rng = RngStream(seed, "sdqn/replay")
    pcv_rng = RngStream(seed, "sdqn/pcv")
    result = TrainResult(agent, buffer)
    n_episodes = 0
    n_violations = 0
    t0 = time.perf_counter()
    for k in range(cfg.iterations):
        rollouts = []
        for _ in range(cfg.episodes_per_iteration):
            ro = run_episode(agent, env, cfg.explore_rate(k), cfg.sample_policy, explore_rng, mc_rng, n_episodes)
            buffer.add(ro.episode)
            result.buffer_sizes.append(len(buffer))
            rollouts.append(ro)
            n_episodes += 1
        losses = []
        agent.opt.lr_scale = agent.pcv_opt.lr_scale = cfg.lr_scale(k)
        if len(buffer) >= cfg.learn_after:
            for _ in range(cfg.train_steps):
                losses.append(agent.train_step(buffer, cfg.per_beta(k), replay_rng, pcv_rng))
        agent.iteration = k + 1
        if agent.iteration % cfg.target_sync == 0:
            agent.sync_targets()
        if agent.iteration % cfg.baseline_refresh == 0:
            agent.refresh_baseline()
        mean = {key: (float(np.mean([l[key] for l in losses])) if losses else None)
                for key in ("loss_q", "loss_qd", "loss_qt", "loss_pcv")}
        if not cfg.shield:
            mean["loss_pcv"] = None
        wall = time.perf_counter() - t0
        result.timings.append(wall)
        for j, ro in enumerate(rollouts):
            n_violations += ro.constraint > cfg.d0
            ep_index = n_episodes - len(rollouts) + j
            row = {"iteration": agent.iteration, "episode": ep_index, "return": ro.ret,
                   "cum_constraint_cost": ro.constraint, "epsilon_tilde": ro.eps_tilde,
                   **mean, "violation_rate": n_violations / (ep_index + 1),
                   "wallclock_s": wall if record_wallclock else None}
            bad = [c for c, v in row.items() if isinstance(v, float) and not math.isfinite(v)]
            if bad:
                if out_dir is not None:
                    agent.save(Path(out_dir) / "diagnostic", {"bad_metrics": bad, "row": {c: str(v) for c, v in row.items()}})
                raise NumericError(f"non-finite metrics {bad} at iteration {agent.iteration}")
            result.metrics.append(row)
        if on_iteration is not None:
            on_iteration(agent, result)
    if out_dir is not None:
        out = Path(out_dir)
        write_metrics(out / "metrics.csv", result.metrics)
        agent.save(out / "checkpoint")
        if agent.prediction_log is not None:
            agent.prediction_log.write(out / "pcv_predictions.csv")
    return result
