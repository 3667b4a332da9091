"""Run a configured experiment: train every seed (and sweep point), evaluate, dump attention.

Layout under ``<out_dir>/<name>/``::

    manifest.yaml                    resolved config, every default materialised
    [<key>=<value>/]seed_<s>/
        map.txt                      the map trained on
        metrics.csv                  one row per training episode
        checkpoint/                  final agent (with env spec and map seed)
        eval.json                    greedy evaluation report
        attention.csv                attention weights on one greedy episode
"""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

from ..encoder import dump_attention
from ..gridworld import GridWorld, save_map
from ..nn.rng import RngStream
from ..sdqn import SafeAgent, train
from .attention import attention_weights, record_trajectory
from .config import ExperimentConfig, load_config, sweep_points, write_manifest
from .evaluate import evaluate_agent


def run_one(cfg: ExperimentConfig, seed: int, out, on_iteration=None) -> dict:
    """Train, checkpoint, evaluate and dump attention for one seed; returns the evaluation summary."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    map_seed = cfg.seed_map(seed)
    env = GridWorld(cfg.env, seed=map_seed, rng=RngStream(seed, "gridworld/dynamics"))
    save_map(cfg.env, env.initial, out / "map.txt")
    agent = SafeAgent(cfg.encoder, cfg.ensemble, cfg.train, seed)
    train(agent, env, seed, out_dir=out, record_wallclock=cfg.record_wallclock, on_iteration=on_iteration)
    agent.save(out / "checkpoint", {"env": asdict(cfg.env), "map_seed": map_seed})
    report = evaluate_agent(agent, cfg.env, cfg.eval_episodes, seed, map_seed)
    report.to_json(out / "eval.json")
    eval_env = GridWorld(cfg.env, seed=map_seed, rng=RngStream(seed, "attention/dynamics"))
    traj = record_trajectory(agent, eval_env, steps=cfg.env.episode_cap)
    dump_attention(out / "attention.csv", attention_weights(agent, traj))
    return {"mean_return": report.mean_return, "mean_constraint": report.mean_constraint,
            "safety_rate": report.safety_rate}


def run_experiment(config, overrides=(), out_dir=None, progress=None) -> Path:
    """Run every sweep point and seed of ``config`` (a path, reference name or :class:`ExperimentConfig`)."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config, overrides)
    root = Path(out_dir if out_dir is not None else cfg.out_dir) / cfg.name
    write_manifest(cfg, root / "manifest.yaml")
    for label, point in sweep_points(cfg):
        base = root / label if label else root
        for seed in point.seeds:
            summary = run_one(point, seed, base / f"seed_{seed}")
            if progress is not None:
                progress(label, seed, summary)
    return root
