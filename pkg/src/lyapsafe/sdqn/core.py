"""Numerical building blocks of the safe Q-iteration.

All value arrays are costs (lower is better) with actions on the last axis.
"""
from __future__ import annotations

import numpy as np

from .. import nn
from ..errors import DegenerateStoppingTimeError, NumericError, ParameterError
from ..nn import functional as F
from ..nn.tensor import Tensor, as_tensor


def q_l_value(q_d, q_t, eps_tilde):
    """Lyapunov action values ``Q_D + eps * Q_T``."""
    eps = np.asarray(eps_tilde, dtype=np.float64)
    if np.any(eps < 0):
        raise ParameterError("eps_tilde must be non-negative")
    if eps.ndim:
        eps = eps[..., None]
    return np.asarray(q_d, dtype=np.float64) + eps * np.asarray(q_t, dtype=np.float64)


def epsilon_tilde(policy_row, q_d, q_t, d0: float):
    """Auxiliary constraint slack at the start state, clamped at zero.

    ``(d0 - pi^T Q_D) / (pi^T Q_T)``; works row-wise on stacked inputs.
    """
    pi = np.asarray(policy_row, dtype=np.float64)
    num = d0 - np.sum(pi * np.asarray(q_d, dtype=np.float64), axis=-1)
    den = np.sum(pi * np.asarray(q_t, dtype=np.float64), axis=-1)
    if np.any(~(den > 0)):
        raise DegenerateStoppingTimeError("expected stopping time at the start state is not positive")
    out = np.maximum(0.0, num / den)
    return float(out) if np.ndim(out) == 0 else out


def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(n, k=1)
    return i, j


def safe_policy_lp_batch(q, q_l, baseline, eps_tilde) -> np.ndarray:
    """Row-wise ``argmin_pi pi^T q`` s.t. ``(pi - pi_B)^T q_l <= eps`` on the simplex.

    An optimum lies on a vertex of the feasible polytope: either a simplex corner
    that satisfies the constraint, or the point of a simplex edge where the
    constraint is tight. All of them are enumerated (corners first, then edges in
    lexicographic pair order) and the first minimiser is returned. ``eps`` may be
    ``inf``, which leaves only the simplex.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    pb = np.atleast_2d(np.asarray(baseline, dtype=np.float64))
    N, A = q.shape
    eps = np.broadcast_to(np.asarray(eps_tilde, dtype=np.float64), (N,))
    if np.any(eps < 0) or np.any(np.isnan(eps)):
        raise ParameterError("eps_tilde must be non-negative")
    free = np.isinf(eps)
    ql = np.atleast_2d(np.asarray(q_l, dtype=np.float64))
    ql = np.where(free[:, None], 0.0, ql)
    b = np.where(free, np.inf, np.sum(pb * ql, axis=-1) + np.where(free, 0.0, eps))
    tol = 1e-12 * np.maximum(1.0, np.abs(np.where(free, 0.0, b)))

    corner_ok = ql <= (b + tol)[:, None]
    obj = [np.where(corner_ok, q, np.inf)]
    lam = np.zeros((N, 0))
    i, j = _pairs(A)
    if len(i):
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (b[:, None] - ql[:, j]) / (ql[:, i] - ql[:, j])
        edge_ok = (lam > 0) & (lam < 1) & ~free[:, None]
        lam = np.where(edge_ok, lam, 0.0)
        obj.append(np.where(edge_ok, lam * q[:, i] + (1 - lam) * q[:, j], np.inf))
    obj = np.concatenate(obj, axis=1)
    best = np.argmin(obj, axis=1)
    out = np.zeros((N, A))
    rows = np.arange(N)
    corner = best < A
    out[rows[corner], best[corner]] = 1.0
    e = best[~corner] - A
    r = rows[~corner]
    out[r, i[e]] = lam[r, e]
    out[r, j[e]] += 1.0 - lam[r, e]
    # rounding can leave every candidate infeasible only when pi_B itself is the tight point
    none = ~np.isfinite(obj[rows, best])
    out[none] = pb[none]
    return out


def safe_policy_lp(q, q_l, baseline, eps_tilde: float) -> np.ndarray:
    """Single-state version of :func:`safe_policy_lp_batch`."""
    return safe_policy_lp_batch(np.asarray(q)[None], np.asarray(q_l)[None], np.asarray(baseline)[None],
                                np.asarray([eps_tilde], dtype=np.float64))[0]


def compute_targets(cost, constraint, next_terminal, nonterminal, q_next, qd_next, qt_next,
                    pi_k_next, pi_prime_next, gamma: float = 1.0):
    """Regression targets ``(y_D, y_T, y)`` for a batch of transitions.

    ``pi_k_next`` weighs the constraint and stopping-time bootstraps,
    ``pi_prime_next`` (the projected policy at the next state) the objective one.
    Bootstraps vanish at terminal next states; ``y_T`` counts the current step
    only when the current state is non-terminal.
    """
    boot = gamma * (1.0 - np.asarray(next_terminal, dtype=np.float64))
    pk = np.asarray(pi_k_next, dtype=np.float64)
    y_d = np.asarray(constraint, dtype=np.float64) + boot * np.sum(pk * qd_next, axis=-1)
    y_t = np.asarray(nonterminal, dtype=np.float64) + boot * np.sum(pk * qt_next, axis=-1)
    y = np.asarray(cost, dtype=np.float64) + boot * np.sum(np.asarray(pi_prime_next) * q_next, axis=-1)
    return y_d, y_t, y


def td_loss(pred: Tensor, target, weights=None) -> tuple[Tensor, np.ndarray]:
    """Importance-weighted ``mean 0.5 w (y - Q)^2`` and the absolute TD errors."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    td = target - pred.data
    if not np.all(np.isfinite(td)):
        raise NumericError("non-finite temporal-difference error")
    return F.weighted_squared_error(pred, target, weights), np.abs(td)


def td_update(store, opt, predict, target, weights=None) -> np.ndarray:
    """One optimizer step on :func:`td_loss` of ``predict()``; returns ``|TD|`` before the step."""
    loss, td = td_loss(predict(), target, weights)
    store.zero_grad()
    loss.backward()
    nn.optimizer_step(store, opt)
    return td


def distill_loss(logits: Tensor, targets) -> Tensor:
    """Mean Jensen-Shannon divergence between ``softmax(logits)`` rows and target rows."""
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(targets < -1e-12) or not np.allclose(targets.sum(axis=-1), 1.0, atol=1e-9):
        raise ParameterError("distillation targets must be probability rows")
    return F.js_divergence_loss(F.softmax(logits, axis=-1), targets)


def distill_policy(store, opt, logits_fn, targets) -> float:
    """One distillation step; returns the loss before the step."""
    loss = distill_loss(logits_fn(), targets)
    store.zero_grad()
    loss.backward()
    nn.optimizer_step(store, opt)
    return loss.item()
