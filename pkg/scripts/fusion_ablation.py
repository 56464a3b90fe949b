"""Train every fusion variant under the same protocol and print a comparison table.

Takes roughly 20 minutes on one core at the default 500 iterations.
"""
import argparse
import csv
import sys

from treederain.experiments import desk_experiment
from treederain.network import FusionMode

ORDER = [FusionMode.SUM, FusionMode.ACROSS_ONLY, FusionMode.WITHIN_ONLY, FusionMode.TREE]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--csv", help="also write the table here")
    args = ap.parse_args()

    rows = []
    for mode in ORDER:
        r = desk_experiment(mode, args.iters, args.seed)
        rows.append([mode.value, r.params, f"{r.initial_loss:.4f}", f"{r.final_loss:.4f}",
                     f"{r.psnr_rainy_db:.2f}", f"{r.psnr_derained_db:.2f}", f"{r.seconds:.0f}"])
        print(f"done {mode.value}", file=sys.stderr, flush=True)

    header = ["variant", "params", "loss_first50", "loss_last50", "psnr_rainy", "psnr_derained", "seconds"]
    widths = [max(len(str(v)) for v in col) for col in zip(header, *rows)]
    for row in [header, *rows]:
        print("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            csv.writer(f).writerows([header, *rows])


if __name__ == "__main__":
    main()
