"""Tidy smoothed training curves from metrics files.

Output columns: ``method, seed, episode, return, cum_constraint_cost,
return_ma{w}, cum_constraint_cost_ma{w}`` where ``w`` is the trailing
moving-average window. The first ``w - 1`` smoothed values average the
episodes seen so far.
"""
from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from ..errors import ParameterError
from ..sdqn.train import read_metrics

SERIES = ("return", "cum_constraint_cost")


def plot_columns(window: int) -> tuple:
    return ("method", "seed", "episode", *SERIES, *(f"{s}_ma{window}" for s in SERIES))


def moving_average(x, window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` values (fewer at the start)."""
    if window < 1:
        raise ParameterError("window must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, x.size + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


def label_for(path) -> tuple[str, str]:
    """``(method, seed)`` from a ``.../<method>/seed_<n>/metrics.csv`` layout."""
    parent = Path(path).resolve().parent
    m = re.fullmatch(r"seed_(\d+)", parent.name)
    if m:
        return parent.parent.name, m.group(1)
    return parent.name, ""


def emit_plot_data(metrics_files, out_path, window: int = 20, labels=None) -> Path:
    """Write one tidy CSV covering every metrics file; ``labels`` optionally gives ``(method, seed)`` per file."""
    files = [Path(p) for p in metrics_files]
    if not files:
        raise ParameterError("need at least one metrics file")
    if window < 1:
        raise ParameterError("window must be >= 1")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(plot_columns(window))
        for k, f in enumerate(files):
            method, seed = labels[k] if labels is not None else label_for(f)
            rows = read_metrics(f)
            raw = {s: np.array([r[s] for r in rows], dtype=np.float64) for s in SERIES}
            sm = {s: moving_average(raw[s], window) for s in SERIES}
            for i, r in enumerate(rows):
                w.writerow([method, seed, int(r["episode"]), *(repr(float(raw[s][i])) for s in SERIES),
                            *(repr(float(sm[s][i])) for s in SERIES)])
    return out_path
