"""Summarise per-channel statistics of adjacent features and their fusion.

Reads the ``feature_stats.csv`` written by ``treederain derain --dump-features`` and
prints, per fused pair, the channel-averaged mean and std of each input feature,
of their difference and of the fused output.
"""
import argparse
import csv
from collections import defaultdict

import numpy as np


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("stats_csv")
    args = ap.parse_args()

    groups = defaultdict(lambda: defaultdict(list))
    with open(args.stats_csv, newline="") as f:
        for r in csv.DictReader(f):
            key = (r["scope"], r["block"], r["pair"])
            groups[key][r["feature"]].append((float(r["mean"]), float(r["std"])))

    kinds = ["z1", "z2", "diff", "fused"]
    print(f"{'scope':<7}{'block':>6}{'pair':>6}  " + "  ".join(f"{k + ' mean/std':>18}" for k in kinds))
    for (scope, block, pair), feats in groups.items():
        cells = []
        for k in kinds:
            m, s = np.mean(feats[k], axis=0)
            cells.append(f"{m:8.4f}/{s:<9.4f}")
        print(f"{scope:<7}{block:>6}{pair:>6}  " + "  ".join(cells))


if __name__ == "__main__":
    main()
