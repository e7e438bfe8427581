"""Reading metrics.csv files and rendering mean +/- std curve images.

Each run directory holds a ``metrics.csv`` with an ``iteration`` column and
one column per metric; empty cells mean the metric was unavailable at that
iteration. Curves aggregate several seeded runs of the same configuration:
solid line for the mean across runs, shaded band for one standard deviation,
with optional sliding-window smoothing applied to both.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

IMAGE_SIZE = (1200, 800)
DPI = 100


class MetricNotFound(ValueError):
    def __init__(self, run, column):
        super().__init__(f"run {run} has no usable column {column!r}")
        self.run = str(run)
        self.column = column


@dataclass
class CurveSpec:
    metric: str
    runs: list
    window: int = 1
    out: str = "curve.png"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not self.runs:
            raise ValueError("need at least one run directory")


@dataclass
class Curve:
    iterations: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    per_run: np.ndarray = field(repr=False)


def moving_average(series, window: int):
    """Sliding-window mean of length ``window``; shorter at the start so the
    output has the same length as the input."""
    if window < 1:
        raise ValueError("window must be >= 1")
    series = np.asarray(series, dtype=float)
    out = np.empty_like(series)
    csum = np.concatenate([[0.0], np.cumsum(series)])
    for i in range(len(series)):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def load_metric(run_dir, metric: str):
    """(iterations, values) from one run's metrics.csv, skipping empty cells."""
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        raise MetricNotFound(run_dir, metric)
    iters, values = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or metric not in reader.fieldnames:
            raise MetricNotFound(run_dir, metric)
        for row in reader:
            cell = row[metric]
            if cell is None or cell == "":
                continue
            iters.append(int(row["iteration"]))
            values.append(float(cell))
    if not values:
        raise MetricNotFound(run_dir, metric)
    return np.asarray(iters), np.asarray(values)


def aggregate(spec: CurveSpec) -> Curve:
    """Align runs on their shared iteration grid and compute mean/std."""
    series = [load_metric(run, spec.metric) for run in spec.runs]
    base = series[0][0]
    for run, (iters, _) in zip(spec.runs, series):
        if len(iters) != len(base) or not np.array_equal(iters, base):
            raise ValueError(
                f"run {run} logs {spec.metric} on a different iteration grid"
            )
    rows = np.stack([moving_average(vals, spec.window) for _, vals in series])
    return Curve(
        iterations=base,
        mean=rows.mean(axis=0),
        std=rows.std(axis=0),
        per_run=rows,
    )


def plot_metric(spec: CurveSpec) -> Path:
    """Render the aggregate curve to a fixed-size PNG; returns the path."""
    curve = aggregate(spec)
    w, h = IMAGE_SIZE
    fig, ax = plt.subplots(figsize=(w / DPI, h / DPI), dpi=DPI)
    ax.plot(curve.iterations, curve.mean, color="tab:blue", label=spec.metric)
    ax.fill_between(
        curve.iterations,
        curve.mean - curve.std,
        curve.mean + curve.std,
        color="tab:blue",
        alpha=0.25,
        linewidth=0,
    )
    ax.set_xlabel("iteration")
    ax.set_ylabel(spec.metric)
    label = f"{spec.metric} over {len(spec.runs)} runs"
    if spec.window > 1:
        label += f" (window {spec.window})"
    ax.set_title(label)
    ax.legend()
    out = Path(spec.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png", metadata={"Software": "subflow-plot"})
    plt.close(fig)
    return out
