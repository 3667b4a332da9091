"""Violation-probability ensemble and risk-averse action choice.

B small networks read an encoded context together with a flattened one-hot
candidate action sequence and output the logit of "a constraint cost occurs
within the next h steps". Every member is trained on its own bootstrap
resample of each batch; at decision time each member is evaluated several
times with live dropout, and the pooled sigmoid outputs give a mean and an
unbiased variance per candidate.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, NumericError, UsageError
from .nn import functional as F
from .nn.params import ParamStore
from .nn.tensor import Tensor, concat, reshape


@dataclass
class EnsembleConfig:
    members: int = 5
    dropout: float = 0.1
    mc_passes: int = 4
    horizon: int = 5
    lambda_e: float = 1e5
    lambda_v: float = -2000.0
    hidden: tuple = (64, 64)
    label_rule: str = "window"  # or "episode": label 1 when the whole episode exceeds the budget

    def __post_init__(self):
        self.hidden = tuple(int(v) for v in self.hidden)
        problems = []
        if self.members < 1:
            problems.append("ensemble.members must be >= 1")
        if self.mc_passes < 1:
            problems.append("ensemble.mc_passes must be >= 1")
        if self.horizon < 1:
            problems.append("ensemble.horizon must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("ensemble.dropout must lie in [0, 1)")
        if self.members * self.mc_passes < 2 and self.lambda_v != 0:
            problems.append("a variance weight needs at least two samples (members * mc_passes >= 2)")
        if self.label_rule not in ("window", "episode"):
            problems.append("ensemble.label_rule must be 'window' or 'episode'")
        if problems:
            raise ConfigError(problems)

    @property
    def n_samples(self) -> int:
        return self.members * self.mc_passes


@dataclass
class PcvEstimate:
    """Per-candidate sample mean, unbiased variance and the raw (N, B*M) samples."""

    mean: np.ndarray
    variance: np.ndarray
    samples: np.ndarray

    @property
    def count(self) -> int:
        return self.samples.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def bootstrap_resample(n: int, B: int, rng) -> list[np.ndarray]:
    """``B`` index arrays of ``n`` uniform draws with replacement from ``range(n)``."""
    if n < 1:
        raise UsageError("cannot bootstrap an empty dataset")
    gen = getattr(rng, "generator", rng)
    return [gen.integers(0, n, size=n) for _ in range(B)]


def label_violation(window) -> int:
    """1 when the constraint costs in the (possibly terminal-truncated) window sum to at least 1."""
    return int(float(np.sum(window)) >= 1.0)


def window_labels(constraint_costs, horizon: int) -> np.ndarray:
    """Label at every step t of an episode from ``d_t .. d_{t+h-1}`` (truncated at the end)."""
    d = np.asarray(constraint_costs, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(d)])
    T = len(d)
    t = np.arange(T)
    end = np.minimum(t + horizon, T)
    return (csum[end] - csum[t] >= 1.0).astype(np.float64)


def select_risk_averse_action(means, variances, lambda_e: float, lambda_v: float) -> int:
    """Index minimising ``lambda_e * mean + lambda_v * std``; lowest index on ties."""
    score = lambda_e * np.asarray(means, dtype=np.float64) + lambda_v * np.sqrt(np.asarray(variances, dtype=np.float64))
    return int(np.argmin(score))


def one_hot_sequences(seqs, n_actions: int) -> np.ndarray:
    """(N, h) integer action sequences to (N, h * n_actions) flattened one-hots."""
    seqs = np.asarray(seqs, dtype=int)
    return np.eye(n_actions)[seqs].reshape(seqs.shape[0], -1)


class SafetyEnsemble:
    def __init__(self, cfg: EnsembleConfig, context_dim: int, n_actions: int, prefix: str = "pcv"):
        self.cfg = cfg
        self.context_dim = context_dim
        self.n_actions = n_actions
        self.prefix = prefix
        sizes = [context_dim + cfg.horizon * n_actions, *cfg.hidden, 1]
        self.nets = [nn.MLP(f"{prefix}.m{b}", sizes, cfg.dropout) for b in range(cfg.members)]

    def init(self, store: ParamStore, rng) -> None:
        for net in self.nets:
            net.init(store, rng)

    def inputs(self, g, seqs) -> Tensor:
        g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
        return concat([g, Tensor(one_hot_sequences(seqs, self.n_actions))], axis=-1)

    def member_logits(self, store: ParamStore, b: int, x: Tensor, mode: str, rng=None) -> Tensor:
        out = self.nets[b](store, x, mode, rng)
        return reshape(out, (out.shape[0],))

    def predict(self, store: ParamStore, g, seqs, rng) -> PcvEstimate:
        """Pooled MC-dropout samples over every member for each (context, sequence) row."""
        x = self.inputs(np.asarray(getattr(g, "data", g)), seqs)
        samples = []
        with nn.no_grad():
            for b in range(self.cfg.members):
                for _ in range(self.cfg.mc_passes):
                    samples.append(nn.sigmoid(self.member_logits(store, b, x, "mc", rng)).data)
        return aggregate(np.stack(samples, axis=-1))

    def loss(self, store: ParamStore, g, seqs, labels, rng, boot: list | None = None, weights=None) -> Tensor:
        """Mean over members of the BCE on each member's bootstrap rows (train-mode dropout).

        ``weights`` optionally rescales rows, e.g. to undo non-uniform replay sampling.
        """
        labels = np.asarray(labels, dtype=np.float64)
        n = len(labels)
        if n == 0:
            raise UsageError("empty violation batch")
        # a Tensor context keeps its gradient path (joint training); arrays are detached
        g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
        boot = bootstrap_resample(n, self.cfg.members, rng) if boot is None else boot
        total = Tensor(0.0)
        for b, idx in enumerate(boot):
            x = self.inputs(g[idx], np.asarray(seqs)[idx])
            wt = None if weights is None else np.asarray(weights, dtype=np.float64)[idx]
            total = total + F.bce_with_logits(self.member_logits(store, b, x, "train", rng), labels[idx], wt)
        return total * (1.0 / self.cfg.members)

    def train_step(self, store: ParamStore, opt, g, seqs, labels, rng, weights=None) -> float:
        loss = self.loss(store, g, seqs, labels, rng, weights=weights)
        if not np.isfinite(loss.item()):
            raise NumericError("non-finite violation-prediction loss")
        store.zero_grad()
        loss.backward()
        nn.optimizer_step(store, opt)
        return loss.item()


def aggregate(samples: np.ndarray) -> PcvEstimate:
    """Mean and unbiased variance over the last axis (variance 0 for a single sample)."""
    samples = np.asarray(samples, dtype=np.float64)
    k = samples.shape[-1]
    mean = samples.mean(axis=-1)
    var = samples.var(axis=-1, ddof=1) if k > 1 else np.zeros_like(mean)
    # exact zero whenever the samples coincide
    var = np.where(np.all(samples == samples[..., :1], axis=-1), 0.0, np.maximum(var, 0.0))
    mean = np.clip(mean, samples.min(axis=-1), samples.max(axis=-1))
    return PcvEstimate(mean, var, samples)


# -- prediction log -------------------------------------------------------------------------------
PREDICTION_COLUMNS = ("episode", "step", "candidate", "first_action", "mean", "variance", "chosen")


class PredictionLog:
    """Rows of per-step candidate estimates; written as CSV on :meth:`write`."""

    def __init__(self):
        self.rows: list[tuple] = []

    def record(self, episode: int, step: int, seqs, est: PcvEstimate, chosen: int) -> None:
        for i in range(len(est.mean)):
            self.rows.append((episode, step, i, int(np.asarray(seqs)[i][0]), float(est.mean[i]),
                              float(est.variance[i]), int(i == chosen)))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PREDICTION_COLUMNS)
            for r in self.rows:
                w.writerow([r[0], r[1], r[2], r[3], repr(r[4]), repr(r[5]), r[6]])
        return path
