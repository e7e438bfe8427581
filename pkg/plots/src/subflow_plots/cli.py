"""Command line for curve rendering:

    subflow-plot --metric d_tv --runs runs/a runs/b --window 5 --out fig.png
"""

from __future__ import annotations

import argparse
import sys

from .core import CurveSpec, MetricNotFound, plot_metric


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="subflow-plot", description=__doc__)
    p.add_argument("--metric", required=True, help="metrics.csv column to plot")
    p.add_argument("--runs", required=True, nargs="+", help="run directories")
    p.add_argument("--window", type=int, default=1, help="smoothing window")
    p.add_argument("--out", required=True, help="output PNG path")
    args = p.parse_args(argv)
    try:
        spec = CurveSpec(metric=args.metric, runs=args.runs, window=args.window,
                         out=args.out)
        path = plot_metric(spec)
    except (MetricNotFound, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
