"""Optimizers over a :class:`~lyapsafe.nn.params.ParamStore`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError
from .params import ParamStore


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    # longest-matching name prefix -> learning rate
    lr_overrides: dict[str, float] = field(default_factory=dict)
    lr_scale: float = 1.0  # multiplies every learning rate (schedules)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        best, lr = -1, self.lr
        for prefix, value in self.lr_overrides.items():
            if name.startswith(prefix) and len(prefix) > best:
                best, lr = len(prefix), value
        return lr


def _check_finite(name, g):
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient for parameter {name!r}")


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [t.grad for _, t in params.items() if t.grad is not None]
    for name, t in params.items():
        if t.grad is not None:
            _check_finite(name, t.grad)
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm > 0:
        scale = max_norm / total
        for _, t in params.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return total


def adam_step(params: ParamStore, state: AdamState) -> ParamStore:
    """One bias-corrected Adam update; parameters without a gradient are skipped.

    Gradients are cleared afterwards.
    """
    for name, t in params.items():
        if t.grad is not None:
            _check_finite(name, t.grad)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - state.lr_scale * state.lr_for(name) * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.zero_grad()
    return params


@dataclass
class SGDState:
    lr: float = 1e-2
    lr_overrides: dict[str, float] = field(default_factory=dict)
    step: int = 0

    lr_for = AdamState.lr_for


def sgd_step(params: ParamStore, state: SGDState) -> ParamStore:
    for name, t in params.items():
        if t.grad is not None:
            _check_finite(name, t.grad)
    state.step += 1
    for name, t in params.items():
        if t.grad is not None:
            t.data = t.data - state.lr_for(name) * t.grad
    params.zero_grad()
    return params


def optimizer_step(params: ParamStore, state) -> ParamStore:
    if isinstance(state, AdamState):
        return adam_step(params, state)
    return sgd_step(params, state)
