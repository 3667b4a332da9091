"""Episode storage with proportional prioritized sampling over individual steps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ParameterError, UsageError


@dataclass
class Episode:
    """One rollout: ``T`` transitions and ``T + 1`` observations.

    ``encodings`` holds the acting-time context vectors (``T + 1`` rows) and is
    only filled in stale-encoding mode.
    """

    observations: np.ndarray
    actions: np.ndarray
    costs: np.ndarray
    constraints: np.ndarray
    terminal: bool
    encodings: np.ndarray | None = None

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=int)
        self.costs = np.asarray(self.costs, dtype=np.float64)
        self.constraints = np.asarray(self.constraints, dtype=np.float64)
        if len(self.observations) != len(self.actions) + 1:
            raise UsageError("an episode needs one more observation than actions")

    def __len__(self):
        return len(self.actions)

    def aux_inputs(self, n_actions: int, cost_scale: float) -> np.ndarray:
        """Per-step previous (action one-hot, scaled cost, constraint) block, ``T + 1`` rows."""
        T = len(self)
        out = np.zeros((T + 1, n_actions + 2))
        out[np.arange(1, T + 1), self.actions] = 1.0
        out[1:, n_actions] = self.costs * cost_scale
        out[1:, n_actions + 1] = self.constraints
        return out


class PrioritizedReplay:
    """FIFO step buffer; step ``i`` is drawn with probability ``p_i / sum p``.

    ``p = (|TD| + floor) ** alpha``; new steps enter with the largest priority
    seen so far. Episodes stay stored while any of their steps are live because
    re-encoding a step needs its whole prefix.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, floor: float = 1e-3, prioritized: bool = True):
        if capacity < 1:
            raise ParameterError("replay capacity must be positive")
        if floor <= 0:
            raise ParameterError("priority floor must be positive")
        self.capacity = int(capacity)
        self.alpha = float(alpha)
        self.floor = float(floor)
        self.prioritized = prioritized
        self.ep = np.full(self.capacity, -1, dtype=np.int64)
        self.t = np.zeros(self.capacity, dtype=np.int64)
        self.priority = np.zeros(self.capacity)
        self.size = 0
        self.head = 0
        self.max_priority = 1.0
        self.episodes: dict[int, Episode] = {}
        self._live: dict[int, int] = {}
        self._next_id = 0

    def __len__(self):
        return self.size

    def add(self, episode: Episode) -> int:
        eid = self._next_id
        self._next_id += 1
        self.episodes[eid] = episode
        self._live[eid] = 0
        for t in range(len(episode)):
            old = self.ep[self.head]
            if old >= 0:
                self._live[old] -= 1
                if self._live[old] == 0 and old != eid:
                    del self._live[old], self.episodes[old]
            self.ep[self.head] = eid
            self.t[self.head] = t
            self.priority[self.head] = self.max_priority
            self._live[eid] += 1
            self.head = (self.head + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
        if self._live[eid] == 0:
            del self._live[eid], self.episodes[eid]
        return eid

    def probabilities(self) -> np.ndarray:
        if self.size == 0:
            raise UsageError("empty replay buffer")
        if not self.prioritized:
            return np.full(self.size, 1.0 / self.size)
        p = self.priority[: self.size]
        return p / p.sum()

    def sample(self, n: int, rng, beta: float = 0.4) -> tuple[np.ndarray, np.ndarray]:
        """``n`` slot indices and importance weights ``(N P(i))^-beta`` scaled by their batch max."""
        gen = getattr(rng, "generator", rng)
        if not self.prioritized:
            return gen.integers(0, self.size, size=n), np.ones(n)
        P = self.probabilities()
        idx = gen.choice(self.size, size=n, p=P)
        w = (self.size * P[idx]) ** (-beta)
        return idx, w / w.max()

    def update_priorities(self, idx, td) -> None:
        p = (np.abs(np.asarray(td, dtype=np.float64)) + self.floor) ** self.alpha
        self.priority[np.asarray(idx)] = p
        self.max_priority = max(self.max_priority, float(p.max()))

    def records(self, idx) -> list[tuple[Episode, int]]:
        return [(self.episodes[int(self.ep[i])], int(self.t[i])) for i in np.asarray(idx)]

    def episode_ids(self, idx) -> np.ndarray:
        return self.ep[np.asarray(idx)]
