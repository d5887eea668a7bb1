"""Render the plot-data series written by `adsync run`.

    python docs/plot_trace.py adsync-out/theorem1_demo [--log] [--out figure.png]
"""

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib.pyplot as plt


def read_series(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [float(r[0]) for r in rows], [float(r[1]) for r in rows]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("run_dir", type=Path)
    parser.add_argument("--log", action="store_true", help="log scale on |value|")
    parser.add_argument("--out", type=Path, help="write an image instead of showing a window")
    args = parser.parse_args()

    groups = defaultdict(list)
    for path in sorted((args.run_dir / "plots").glob("*.csv")):
        metric, _, agent = path.stem.rpartition("_")
        groups[metric if agent.isdigit() else path.stem].append(path)

    fig, axes = plt.subplots(len(groups), 1, sharex=True, figsize=(8, 2.2 * len(groups)))
    for ax, (metric, paths) in zip(axes, sorted(groups.items())):
        for path in paths:
            t, y = read_series(path)
            if args.log:
                y = [abs(v) for v in y]
            ax.plot(t, y, lw=0.8, label=path.stem)
        if args.log:
            ax.set_yscale("log")
        ax.set_ylabel(metric)
        ax.legend(fontsize="x-small", loc="upper right")
    axes[-1].set_xlabel("t")
    fig.tight_layout()
    if args.out:
        fig.savefig(args.out, dpi=120)
    else:
        plt.show()


if __name__ == "__main__":
    main()
