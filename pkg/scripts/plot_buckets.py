#!/usr/bin/env python3
"""Plot a buckets_<variant>.csv as prediction error vs degradation decile.

Usage: python scripts/plot_buckets.py out/run/buckets_fully-federated.csv [out.png]
"""

import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main(argv):
    if not 2 <= len(argv) <= 3:
        print(__doc__)
        return 2
    src = Path(argv[1])
    dst = Path(argv[2]) if len(argv) == 3 else src.with_suffix(".png")
    rows = list(csv.DictReader(open(src, newline="", encoding="utf-8")))
    rows = [r for r in rows if int(r["count"]) > 0]
    deciles = [int(r["decile"]) * 10 for r in rows]
    mean = [float(r["mean_error"]) for r in rows]
    med = [float(r["median_error"]) for r in rows]
    q25 = [float(r["q25"]) for r in rows]
    q75 = [float(r["q75"]) for r in rows]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(deciles, q25, q75, alpha=0.25, label="interquartile range")
    ax.plot(deciles, mean, "o-", label="mean error")
    ax.plot(deciles, med, "s--", label="median error")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("degradation percentile (%)")
    ax.set_ylabel("prediction error")
    ax.set_title(src.stem.replace("buckets_", ""))
    ax.legend()
    fig.tight_layout()
    fig.savefig(dst, dpi=150)
    print(f"wrote {dst}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
