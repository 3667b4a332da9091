"""Evaluation protocol: greedy shielded rollouts with summary statistics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from ..errors import DimensionError, ParameterError
from ..gridworld import GridSpec, GridWorld
from ..nn.rng import RngStream
from ..sdqn import SafeAgent, run_episode


@dataclass
class EvalReport:
    returns: list
    constraints: list
    d0: float
    mean_return: float
    mean_constraint: float
    ci_return: float  # 95% Student-t half-width
    ci_constraint: float
    safety_rate: float  # fraction of episodes with D <= d0
    goal_rate: float

    @property
    def n(self) -> int:
        return len(self.returns)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path


def ci_halfwidth(x, level: float = 0.95) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ParameterError("a confidence interval needs at least 2 episodes")
    return float(stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size))


def make_report(returns, constraints, d0: float, goals=None) -> EvalReport:
    r = np.asarray(returns, dtype=np.float64)
    c = np.asarray(constraints, dtype=np.float64)
    g = np.zeros(len(r)) if goals is None else np.asarray(goals, dtype=np.float64)
    return EvalReport([float(v) for v in r], [float(v) for v in c], float(d0), float(r.mean()), float(c.mean()),
                      ci_halfwidth(r), ci_halfwidth(c), float(np.mean(c <= d0)), float(g.mean()))


def evaluate_policy(policy, spec: GridSpec, n: int, seed: int, d0: float, map_seed: int | None = None) -> EvalReport:
    """Roll out a stateless ``policy(observation) -> action`` for ``n`` episodes."""
    env = GridWorld(spec, seed=seed if map_seed is None else map_seed, rng=RngStream(seed, "eval/dynamics"))
    rets, cons, goals = [], [], []
    for _ in range(n):
        obs = env.reset()
        ret = con = 0.0
        while True:
            res = env.step(int(policy(obs)))
            ret -= res.cost
            con += res.constraint_cost
            obs = res.observation
            if res.terminal or res.truncated:
                goals.append(res.reward_event)
                break
        rets.append(ret)
        cons.append(con)
    return make_report(rets, cons, d0, goals)


def checkpoint_env(meta: dict) -> tuple[GridSpec, int]:
    if "env" not in meta:
        raise ParameterError("checkpoint carries no environment spec; pass one explicitly")
    return GridSpec(**meta["env"]), int(meta.get("map_seed", meta.get("seed", 0)))


def evaluate_agent(agent: SafeAgent, spec: GridSpec, n: int, seed: int, map_seed: int) -> EvalReport:
    if tuple(spec.obs_shape()) != tuple(agent.enc_cfg.obs_shape) or spec.obs_mode != agent.enc_cfg.obs_mode:
        raise DimensionError(f"environment observations {spec.obs_mode} {spec.obs_shape()} do not fit the "
                             f"checkpoint's encoder ({agent.enc_cfg.obs_mode} {tuple(agent.enc_cfg.obs_shape)})")
    env = GridWorld(spec, seed=map_seed, rng=RngStream(seed, "eval/dynamics"))
    mc = RngStream(seed, "eval/mc")
    rollouts = [run_episode(agent, env, mc_rng=mc, episode=i) for i in range(n)]
    return make_report([r.ret for r in rollouts], [r.constraint for r in rollouts], agent.cfg.d0,
                       [r.reached_goal for r in rollouts])


def evaluate(checkpoint, spec: GridSpec | None = None, n: int = 100, seed: int = 0,
             map_seed: int | None = None) -> EvalReport:
    """Greedy risk-averse rollouts of a saved agent (no exploration); the checkpoint is only read.

    Without ``spec`` the environment stored in the checkpoint is used, on the
    map it was trained on.
    """
    agent = SafeAgent.load(checkpoint)
    stored_spec, stored_map = checkpoint_env(agent.meta) if "env" in agent.meta else (None, agent.seed)
    spec = spec if spec is not None else stored_spec
    if spec is None:
        raise ParameterError("checkpoint carries no environment spec; pass one explicitly")
    return evaluate_agent(agent, spec, n, seed, stored_map if map_seed is None else map_seed)
