"""Train one fusion variant with the small CPU protocol and report loss and PSNR.

    python scripts/desk_train.py --mode tree --out tree.ckpt
"""
import argparse

from treederain.experiments import desk_experiment
from treederain.io import save_checkpoint
from treederain.network import FusionMode


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", default="tree", choices=[m.value for m in FusionMode])
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="save the trained network here")
    args = ap.parse_args()

    r = desk_experiment(args.mode, args.iters, args.seed, on_log=lambda row: print(
        f"iter {row.iteration:5d}  loss {row.loss:.4f}  batch psnr {row.batch_psnr_db:.2f}", flush=True))
    print(f"params              {r.params}")
    print(f"loss first/last 50  {r.initial_loss:.4f} -> {r.final_loss:.4f}  (ratio {r.loss_ratio:.3f})")
    print(f"psnr rainy/derained {r.psnr_rainy_db:.2f} -> {r.psnr_derained_db:.2f} dB  (+{r.psnr_gain_db:.2f})")
    print(f"wall time           {r.seconds:.0f} s")
    if args.out:
        save_checkpoint(r.net, r.run.state, args.out)


if __name__ == "__main__":
    main()
