from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError


@dataclass
class TrainConfig:
    d0: float = 5.0
    gamma: float = 0.99
    iterations: int = 200
    episodes_per_iteration: int = 1
    batch_size: int = 32
    train_steps: int = 10  # gradient steps per iteration
    learn_start: int | None = None  # buffered steps before training; default batch_size
    target_sync: int = 10
    baseline_refresh: int = 50
    baseline_warmup: int | None = None  # iterations with an unconstrained projection; default baseline_refresh
    eps_start: float = 0.2
    eps_end: float = 0.01
    explore_anneal: int | None = None  # iterations; default iterations // 2
    lr: float = 1e-4  # encoder and distilled policy
    lr_alpha: float = 1e-4  # constraint and stopping-time heads
    lr_beta: float = 1e-4  # objective head
    lr_pcv: float = 1e-4
    pcv_updates: int = 1  # ensemble steps per mini-batch (detached context only)
    lr_decay_to: float = 1.0  # learning-rate multiplier reached linearly at the last iteration
    grad_clip: float | None = 10.0  # joint gradient-norm cap per step; None disables
    capacity: int = 50_000
    prioritized: bool = True
    per_alpha: float = 0.6
    per_beta0: float = 0.4
    per_floor: float = 1e-3
    cost_scale: float = 1e-3  # objective costs are regressed in these units
    qt_scale: float = 10.0  # stopping-time head output = qt_scale * softplus(.)
    head_hidden: tuple = (64,)
    policy_hidden: tuple = (64,)
    shield: bool = True
    shield_tolerance: float = 5000.0  # keep the proposal if its joint cost is within this of the best
    stale_encodings: bool = False
    joint_safety: bool = False
    sample_policy: bool = True  # sample the projected policy while training (argmax otherwise)
    log_predictions: bool = False

    def __post_init__(self):
        self.head_hidden = tuple(int(v) for v in self.head_hidden)
        self.policy_hidden = tuple(int(v) for v in self.policy_hidden)
        problems = []
        for name in ("iterations", "episodes_per_iteration", "batch_size", "target_sync", "baseline_refresh",
                     "capacity", "pcv_updates"):
            if getattr(self, name) < 1:
                problems.append(f"train.{name} must be >= 1")
        if self.train_steps < 0:
            problems.append("train.train_steps must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            problems.append("train.gamma must lie in (0, 1]")
        if self.d0 < 0:
            problems.append("train.d0 must be >= 0")
        for name in ("eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"train.{name} must lie in [0, 1]")
        for name in ("lr", "lr_alpha", "lr_beta", "lr_pcv", "qt_scale", "per_floor", "cost_scale"):
            if not getattr(self, name) > 0:
                problems.append(f"train.{name} must be > 0")
        if not 0.0 < self.lr_decay_to <= 1.0:
            problems.append("train.lr_decay_to must lie in (0, 1]")
        if self.grad_clip is not None and not self.grad_clip > 0:
            problems.append("train.grad_clip must be > 0 or null")
        if not 0.0 <= self.per_beta0 <= 1.0:
            problems.append("train.per_beta0 must lie in [0, 1]")
        if self.shield_tolerance < 0:
            problems.append("train.shield_tolerance must be >= 0")
        if problems:
            raise ConfigError(problems)

    @property
    def warmup(self) -> int:
        return self.baseline_refresh if self.baseline_warmup is None else self.baseline_warmup

    @property
    def learn_after(self) -> int:
        return self.batch_size if self.learn_start is None else self.learn_start

    def explore_rate(self, iteration: int) -> float:
        """Linearly annealed random-proposal probability at a 0-based iteration."""
        span = self.explore_anneal if self.explore_anneal is not None else max(1, self.iterations // 2)
        frac = min(1.0, iteration / max(1, span))
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    def lr_scale(self, iteration: int) -> float:
        frac = min(1.0, iteration / max(1, self.iterations - 1))
        return 1.0 + (self.lr_decay_to - 1.0) * frac

    def per_beta(self, iteration: int) -> float:
        frac = min(1.0, iteration / max(1, self.iterations))
        return self.per_beta0 + (1.0 - self.per_beta0) * frac
