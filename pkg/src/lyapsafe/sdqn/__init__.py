"""Lyapunov-constrained fitted Q-iteration with a shared trajectory encoder."""
from .agent import SafeAgent
from .config import TrainConfig
from .core import (
    compute_targets,
    distill_loss,
    distill_policy,
    epsilon_tilde,
    q_l_value,
    safe_policy_lp,
    safe_policy_lp_batch,
    td_loss,
    td_update,
)
from .replay import Episode, PrioritizedReplay
from .train import METRIC_COLUMNS, Rollout, TrainResult, read_metrics, run_episode, train, write_metrics

__all__ = [
    "Episode", "METRIC_COLUMNS", "PrioritizedReplay", "Rollout", "SafeAgent", "TrainConfig", "TrainResult",
    "compute_targets", "distill_loss", "distill_policy", "epsilon_tilde", "q_l_value", "read_metrics",
    "run_episode", "safe_policy_lp", "safe_policy_lp_batch", "td_loss", "td_update", "train", "write_metrics",
]
