"""Tabular constrained MDPs: Bellman operators, policy evaluation, Lyapunov design.

Conventions
-----------
``P`` has shape (|X|, |A|, |X|) with ``P[x, a, x']`` the transition probability.
Immediate cost ``c`` is (|X|, |A|); constraint cost ``d`` is per state (|X|,).
Terminal states are absorbing and cost-free. Policies are row-stochastic
(|X|, |A|) arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DimensionError, DivergenceError, FeasibilityError, ParameterError, SizeError

ROW_TOL = 1e-12
CHECK_TOL = 1e-9
SPECTRAL_TOL = 1e-10


@dataclass
class CmdpModel:
    P: np.ndarray
    c: np.ndarray
    d: np.ndarray
    x0: int
    d0: float
    gamma: float = 0.99
    terminals: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        self.d = np.asarray(self.d, dtype=np.float64)
        self.terminals = frozenset(int(t) for t in self.terminals)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @property
    def d_max(self) -> float:
        return float(self.d.max()) if self.d.size else 0.0

    @property
    def transient(self) -> np.ndarray:
        mask = np.ones(self.n_states, dtype=bool)
        mask[list(self.terminals)] = False
        return mask

    def validate(self) -> None:
        nx, na = self.P.shape[0], self.P.shape[1]
        if self.P.shape != (nx, na, nx):
            raise DimensionError(f"P must be (|X|,|A|,|X|), got {self.P.shape}")
        if self.c.shape != (nx, na):
            raise DimensionError(f"c must be (|X|,|A|), got {self.c.shape}")
        if self.d.shape != (nx,):
            raise DimensionError(f"d must be (|X|,), got {self.d.shape}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > ROW_TOL:
            raise ParameterError("each P(.|x,a) must be a probability vector")
        if np.any(self.d < 0):
            raise ParameterError("constraint cost d must be non-negative")
        if not self.d0 >= 0:
            raise ParameterError("threshold d0 must be non-negative")
        if not 0.0 < self.gamma <= 1.0:
            raise ParameterError("discount must lie in (0, 1]")
        if not 0 <= self.x0 < nx:
            raise ParameterError("start state out of range")
        for t in self.terminals:
            if not 0 <= t < nx:
                raise ParameterError(f"terminal state {t} out of range")
            if np.any(self.P[t, :, t] != 1.0) or np.any(self.c[t] != 0.0) or self.d[t] != 0.0:
                raise ParameterError(f"terminal state {t} must self-loop with zero cost")

    def replace(self, **kw) -> "CmdpModel":
        args = dict(P=self.P, c=self.c, d=self.d, x0=self.x0, d0=self.d0, gamma=self.gamma, terminals=self.terminals)
        args.update(kw)
        return CmdpModel(**args)


def check_policy(policy: np.ndarray, model: CmdpModel | None = None) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.ndim != 2 or (model is not None and policy.shape != (model.n_states, model.n_actions)):
        raise DimensionError(f"policy shape {policy.shape} does not match the model")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > ROW_TOL:
        raise ParameterError("policy rows must be probability vectors")
    return policy


def uniform_policy(model: CmdpModel) -> np.ndarray:
    return np.full((model.n_states, model.n_actions), 1.0 / model.n_actions)


def deterministic_policy(actions: Iterable[int], n_actions: int) -> np.ndarray:
    actions = np.asarray(list(actions), dtype=int)
    return np.eye(n_actions)[actions]


def _stage(stage_cost, model: CmdpModel) -> np.ndarray:
    h = np.asarray(stage_cost, dtype=np.float64)
    if h.shape == (model.n_states,):
        h = np.repeat(h[:, None], model.n_actions, axis=1)
    if h.shape != (model.n_states, model.n_actions):
        raise DimensionError(f"stage cost shape {h.shape} does not match the model")
    return h


def chain(policy: np.ndarray, model: CmdpModel) -> np.ndarray:
    """State-to-state kernel ``P_pi[x, x'] = sum_a pi(a|x) P(x'|x,a)``."""
    return np.einsum("xa,xay->xy", policy, model.P)


def bellman_apply(policy, stage_cost, v, model: CmdpModel, gamma: float | None = None) -> np.ndarray:
    """``B_{pi,h}[v](x) = sum_a pi(a|x) [h(x,a) + gamma sum_x' P(x'|x,a) v(x')]``.

    ``gamma=1`` gives the undiscounted operator.
    """
    policy = check_policy(policy, model)
    h = _stage(stage_cost, model)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.n_states,):
        raise DimensionError("value function must have one entry per state")
    g = model.gamma if gamma is None else gamma
    return np.einsum("xa,xa->x", policy, h + g * np.einsum("xay,y->xa", model.P, v))


def spectral_radius(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def reachable_states(policy: np.ndarray, model: CmdpModel, start: int | None = None) -> np.ndarray:
    """Boolean mask of states reachable from ``start`` (default x0) under ``policy``."""
    Ppi = chain(policy, model)
    seen = np.zeros(model.n_states, dtype=bool)
    stack = [model.x0 if start is None else start]
    while stack:
        x = stack.pop()
        if seen[x]:
            continue
        seen[x] = True
        stack.extend(np.flatnonzero((Ppi[x] > 0) & ~seen).tolist())
    return seen


def _solve_transient(policy, rhs, model: CmdpModel, gamma: float, restrict: np.ndarray | None = None) -> np.ndarray:
    """Solve ``(I - gamma P_pi) u = rhs`` over transient states (optionally a sub-mask); 0 elsewhere."""
    mask = model.transient.copy()
    if restrict is not None:
        mask &= restrict
    Ppi = chain(policy, model)
    idx = np.flatnonzero(mask)
    u = np.zeros(model.n_states)
    if idx.size == 0:
        return u
    M = Ppi[np.ix_(idx, idx)]
    if gamma >= 1.0:
        rho = spectral_radius(M)
        if rho >= 1.0 - SPECTRAL_TOL:
            raise DivergenceError(f"policy does not reach a terminal state surely (spectral radius {rho:.12f})")
    A = np.eye(idx.size) - gamma * M
    try:
        sol = np.linalg.solve(A, np.asarray(rhs, dtype=np.float64)[idx])
    except np.linalg.LinAlgError as exc:
        raise DivergenceError("singular policy-evaluation system") from exc
    u[idx] = sol
    return u


def policy_values(policy, stage_cost, model: CmdpModel, gamma: float | None = None) -> np.ndarray:
    """Expected (discounted) accumulated stage cost from every state reachable from x0."""
    policy = check_policy(policy, model)
    h = _stage(stage_cost, model)
    g = model.gamma if gamma is None else gamma
    h_pi = np.einsum("xa,xa->x", policy, h)
    return _solve_transient(policy, h_pi, model, g, restrict=reachable_states(policy, model))


def policy_return(policy, stage_cost, model: CmdpModel, gamma: float | None = None) -> float:
    """``C_pi(x0)`` when ``stage_cost`` is c, ``D_pi(x0)`` when it is d.

    Only states reachable from x0 enter the linear system; with ``gamma = 1``
    that reachable chain must be transient or :class:`DivergenceError` is raised.
    """
    return float(policy_values(policy, stage_cost, model, gamma)[model.x0])


def tv_distance(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError("distributions must share a support")
    return 0.5 * float(np.abs(p - q).sum())


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats with ``0 log 0 := 0``."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError("distributions must share a support")
    s = p + q

    def half_kl(a):
        # KL(a || (p+q)/2) written without the midpoint, which can underflow to 0
        nz = a > 0
        return float(np.sum(a[nz] * np.log(2.0 * a[nz] / s[nz])))

    return max(0.5 * half_kl(p) + 0.5 * half_kl(q), 0.0)


@dataclass
class CheckResult:
    passed: bool
    min_slack: float
    worst_state: int | None
    start_slack: float | None = None

    def __bool__(self):
        return self.passed


def induced_policy_check(policy, L, model: CmdpModel, tol: float = CHECK_TOL) -> CheckResult:
    """``B_{pi,d}[L](x) <= L(x)`` for every state, within ``tol``."""
    L = np.asarray(L, dtype=np.float64)
    slack = L - bellman_apply(policy, model.d, L, model)
    worst = int(np.argmin(slack))
    ok = bool(slack[worst] >= -tol)
    return CheckResult(ok, float(slack[worst]), None if ok else worst)


def lyapunov_check(L, baseline, model: CmdpModel, tol: float = CHECK_TOL) -> CheckResult:
    """Membership of ``L`` in the Lyapunov set of ``baseline``.

    Requires ``L >= 0``, ``B_{pi_B,d}[L] <= L`` everywhere and ``L(x0) <= d0``.
    The reported slack is the smallest over all conditions; ``worst_state`` is
    the first violating state (x0 when only the start condition fails).
    """
    L = np.asarray(L, dtype=np.float64)
    res = induced_policy_check(baseline, L, model, tol)
    start_slack = float(model.d0 - L[model.x0])
    min_slack = min(res.min_slack, start_slack, float(L.min()))
    worst = res.worst_state
    if worst is None and L.min() < -tol:
        worst = int(np.argmin(L))
    if worst is None and start_slack < -tol:
        worst = model.x0
    return CheckResult(worst is None, min_slack, worst, start_slack)


def lyapunov_candidate(baseline, epsilon, model: CmdpModel) -> np.ndarray:
    """``L_eps = (I - gamma P_{pi_B})^{-1} (d + eps)`` on transient states, 0 on terminals."""
    baseline = check_policy(baseline, model)
    eps = np.asarray(epsilon, dtype=np.float64)
    if eps.shape != (model.n_states,):
        raise DimensionError("epsilon must have one entry per state")
    return _solve_transient(baseline, model.d + eps, model, model.gamma)


def epsilon_star_bound(tv_per_state, expected_stop_time: float, model: CmdpModel) -> np.ndarray:
    """Upper bound ``2 T D_max D_TV(x) / (1 - gamma)`` on the auxiliary cost (diagnostic)."""
    if model.gamma >= 1.0:
        raise ParameterError("the auxiliary-cost bound needs gamma < 1")
    tv = np.asarray(tv_per_state, dtype=np.float64)
    return 2.0 * expected_stop_time * model.d_max * tv / (1.0 - model.gamma)


def visitation_prices(baseline, model: CmdpModel) -> np.ndarray:
    """Row x0 of ``(I - gamma P_{pi_B})^{-1}`` over transient states (0 on terminals)."""
    mask = model.transient
    idx = np.flatnonzero(mask)
    Ppi = chain(baseline, model)
    M = Ppi[np.ix_(idx, idx)]
    if model.gamma >= 1.0 and spectral_radius(M) >= 1.0 - SPECTRAL_TOL:
        raise DivergenceError("baseline chain is not transient")
    out = np.zeros(model.n_states)
    if model.x0 in model.terminals:
        return out
    e0 = (idx == model.x0).astype(float)
    out[idx] = np.linalg.solve((np.eye(idx.size) - model.gamma * M).T, e0)
    return out


def epsilon_lp_tabular(baseline, model: CmdpModel, price_floor: float = 1e-12) -> np.ndarray:
    """Largest total auxiliary cost whose discounted visitation from x0 fits the slack.

    maximise ``sum_x eps(x)`` s.t. ``eps >= 0`` and
    ``[(I - gamma P_{pi_B})^{-1} eps](x0) <= d0 - D_{pi_B}(x0)``.

    The single coupling constraint makes the optimum a vertex: the whole slack
    goes to the reachable transient state with the smallest visitation price
    (lowest index on ties). States with zero price (unreachable from x0) and
    terminal states receive 0, which keeps the program bounded.
    """
    baseline = check_policy(baseline, model)
    D_b = float(_solve_transient(baseline, model.d, model, model.gamma)[model.x0])
    slack = model.d0 - D_b
    if slack < -CHECK_TOL:
        raise FeasibilityError(f"baseline violates the budget: D(x0)={D_b:.6g} > d0={model.d0:.6g}")
    eps = np.zeros(model.n_states)
    if slack <= 0.0:
        return eps
    prices = visitation_prices(baseline, model)
    live = np.flatnonzero(prices > price_floor)
    if live.size == 0:
        return eps
    best = live[np.argmin(prices[live])]
    eps[best] = slack / prices[best]
    return eps


# -- exact oracle ------------------------------------------------------------------------------
@dataclass
class ExactSolution:
    feasible: bool
    policy: np.ndarray | None
    cost: float
    constraint: float
    n_evaluated: int


def _evaluate_deterministic(actions: dict, model: CmdpModel, reach: list[int]):
    policy = np.zeros((model.n_states, model.n_actions))
    policy[:, 0] = 1.0
    for x, a in actions.items():
        policy[x] = 0.0
        policy[x, a] = 1.0
    mask = np.zeros(model.n_states, dtype=bool)
    mask[reach] = True
    rhs = np.stack([np.einsum("xa,xa->x", policy, model.c), model.d])
    try:
        C = _solve_transient(policy, rhs[0], model, model.gamma, restrict=mask)[model.x0]
        D = _solve_transient(policy, rhs[1], model, model.gamma, restrict=mask)[model.x0]
    except DivergenceError:
        return None
    return policy, float(C), float(D)


def exact_cmdp_solve(model: CmdpModel, max_policies: int = 10**6) -> ExactSolution:
    """Best deterministic policy with ``D(x0) <= d0``, by exhaustive enumeration.

    Only actions at states reachable from x0 influence C and D, so the search
    assigns actions in reachability order and enumerates each equivalence class
    of deterministic policies once. Improper policies (no sure termination
    under gamma = 1) are skipped. Raises :class:`SizeError` once more than
    ``max_policies`` classes would be evaluated.
    """
    nA = model.n_actions
    terminals = model.terminals
    best: list = [None, math.inf, math.inf]
    count = 0
    support = [[np.flatnonzero(model.P[x, a] > 0).tolist() for a in range(nA)] for x in range(model.n_states)]

    def recurse(assigned: dict, order: list, frontier: list):
        nonlocal count
        if not frontier:
            count += 1
            if count > max_policies:
                raise SizeError(f"more than {max_policies} deterministic policy classes")
            res = _evaluate_deterministic(assigned, model, order)
            if res is None:
                return
            policy, C, D = res
            if D <= model.d0 + CHECK_TOL and C < best[1] - 1e-12:
                best[:] = [policy, C, D]
            return
        x = frontier[0]
        rest = frontier[1:]
        for a in range(nA):
            assigned[x] = a
            new = [y for y in support[x][a] if y not in terminals and y not in assigned and y not in rest]
            recurse(assigned, order + [x], rest + sorted(set(new)))
            del assigned[x]

    if model.x0 in terminals:
        return ExactSolution(True, np.eye(nA)[np.zeros(model.n_states, dtype=int)], 0.0, 0.0, 1)
    recurse({}, [], [model.x0])
    if best[0] is None:
        return ExactSolution(False, None, math.inf, math.inf, count)
    return ExactSolution(True, best[0], best[1], best[2], count)


def value_iteration(model: CmdpModel, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Unconstrained optimal cost-to-go (minimisation) by repeated Bellman backups."""
    v = np.zeros(model.n_states)
    for _ in range(max_iter):
        q = model.c + model.gamma * np.einsum("xay,y->xa", model.P, v)
        new = q.min(axis=1)
        new[list(model.terminals)] = 0.0
        if np.max(np.abs(new - v)) < tol:
            return new
        v = new
    return v


# -- plain-text serialisation -------------------------------------------------------------------
def save_text(model: CmdpModel, path) -> None:
    """Header then P, c and d blocks, one row per line, values in ``repr`` precision."""
    nx, na = model.n_states, model.n_actions
    lines = [
        "# cmdp v1",
        f"states {nx}",
        f"actions {na}",
        f"gamma {model.gamma!r}",
        f"x0 {model.x0}",
        f"d0 {float(model.d0)!r}",
        "terminals " + " ".join(str(t) for t in sorted(model.terminals)),
        "P",
    ]
    for x in range(nx):
        for a in range(na):
            lines.append(" ".join(repr(float(v)) for v in model.P[x, a]))
    lines.append("c")
    for x in range(nx):
        lines.append(" ".join(repr(float(v)) for v in model.c[x]))
    lines.append("d")
    lines.append(" ".join(repr(float(v)) for v in model.d))
    Path(path).write_text("\n".join(lines) + "\n")


def load_text(path) -> CmdpModel:
    rows = [ln.strip() for ln in Path(path).read_text().splitlines()]
    rows = [r for r in rows if r and not r.startswith("#")]
    head = {}
    i = 0
    while rows[i] != "P":
        key, _, rest = rows[i].partition(" ")
        head[key] = rest.strip()
        i += 1
    nx, na = int(head["states"]), int(head["actions"])
    i += 1
    P = np.array([[float(v) for v in rows[i + k].split()] for k in range(nx * na)]).reshape(nx, na, nx)
    i += nx * na
    assert rows[i] == "c"
    c = np.array([[float(v) for v in rows[i + 1 + k].split()] for k in range(nx)])
    i += 1 + nx
    assert rows[i] == "d"
    d = np.array([float(v) for v in rows[i + 1].split()])
    terms = frozenset(int(t) for t in head.get("terminals", "").split())
    return CmdpModel(P, c, d, int(head["x0"]), float(head["d0"]), float(head["gamma"]), terms)
