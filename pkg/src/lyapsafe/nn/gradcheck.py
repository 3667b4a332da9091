"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from .params import ParamStore
from .tensor import Tensor


def _as_items(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, ParamStore):
        return list(params.items())
    if isinstance(params, Mapping):
        return list(params.items())
    return [(getattr(t, "name", None) or f"p{i}", t) for i, t in enumerate(params)]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, tiny: float = 1e-10) -> float:
    """``|a - n| / (|a| + |n|)`` in the 2-norm; absolute when both norms are below ``tiny``."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    return diff if scale < tiny else diff / scale


def grad_check(
    fn: Callable[[], Tensor],
    params: ParamStore | Mapping[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng=None,
) -> float:
    """Max relative error between backward() gradients and central differences.

    ``fn`` must be a deterministic scalar function of the tensors in ``params``
    (dropout off or fixed rng). ``max_entries`` limits the number of perturbed
    coordinates per tensor, chosen with ``rng``.
    """
    items = _as_items(params)
    for _, t in items:
        t.grad = None
    out = fn()
    out.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in items}
    for _, t in items:
        t.grad = None

    gen = np.random.default_rng(0) if rng is None else getattr(rng, "generator", rng)
    worst = 0.0
    for name, t in items:
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(gen.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2.0 * h)
        worst = max(worst, relative_error(analytic[name].reshape(-1)[idx], numeric))
    return worst
