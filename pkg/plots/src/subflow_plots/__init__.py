"""Render training curves (mean and spread across seeds) from run metrics."""

from .core import CurveSpec, Curve, load_metric, moving_average, plot_metric

__all__ = ["CurveSpec", "Curve", "load_metric", "moving_average", "plot_metric"]
