"""Command-line entry point: params, train, derain, eval, gradcheck, synth, bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io as _stdio
import logging
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .io import (
    CheckpointError,
    ImageError,
    atomic_write,
    encode_png,
    load_checkpoint,
    load_image,
    save_checkpoint,
)
from .losses import psnr, ssim
from .network import (
    FusionMode,
    NetworkConfig,
    build_network,
    count_parameters,
    feature_stats,
    forward,
)
from .ops import NonFiniteError
from .rain import RainParams, synth_rain, synthetic_clean
from .trainer import AdamState, LogRow, TrainConfig, train

log = logging.getLogger("treederain")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- flat key=value config ----------------------------------------------------

NET_KEYS = {f.name for f in fields(NetworkConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
# "seed" initialises the network; "train_seed" drives patch sampling
CONFIG_KEYS = NET_KEYS | TRAIN_KEYS | {"train_seed", "desk_scale"}


@dataclass
class RunConfig:
    net: NetworkConfig
    train: TrainConfig


def _coerce(key: str, value: str):
    value = value.strip()
    if key == "fusion_mode":
        return FusionMode(value)
    if key == "decay_iters":
        return tuple(int(v) for v in value.replace(",", " ").split())
    if key in ("base_lr", "alpha"):
        return float(value)
    if key == "desk_scale":
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value}")
        return value.lower() in ("true", "1", "yes")
    return int(value)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as e:
            raise UsageError(f"config line {lineno}: bad value for {key}: {e}") from e
    return out


def build_run_config(values: dict) -> RunConfig:
    values = dict(values)
    desk = values.pop("desk_scale", False)
    net_kw = {k: values[k] for k in NET_KEYS if k in values}
    train_kw = {k: values[k] for k in TRAIN_KEYS if k in values}
    if "train_seed" in values:
        train_kw["seed"] = values["train_seed"]
    try:
        net = NetworkConfig(**net_kw)
        base = TrainConfig.desk_scale() if desk else TrainConfig()
        tcfg = replace(base, **train_kw)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if tcfg.patch < 2 * net.max_dilation:
        raise UsageError(f"patch {tcfg.patch} must be >= 2 * max_dilation")
    return RunConfig(net, tcfg)


def load_run_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        try:
            values = parse_config_text(Path(path).read_text())
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
    values.update(overrides or {})
    return build_run_config(values)


# --- manifests --------------------------------------------------------------

MANIFEST_FIELDS = ["clean_path", "rainy_path", "angle", "length", "density", "intensity", "seed"]


def read_manifest(path: str) -> list[tuple[Path, Path]]:
    base = Path(path).parent
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if not rows:
        raise DataError(f"manifest {path} is empty")
    missing = {"clean_path", "rainy_path"} - set(rows[0])
    if missing:
        raise DataError(f"manifest {path} lacks columns {sorted(missing)}")
    return [(base / r["clean_path"], base / r["rainy_path"]) for r in rows]


def load_pairs(manifest: str) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for clean_p, rainy_p in read_manifest(manifest):
        clean, rainy = load_image(clean_p), load_image(rainy_p)
        if clean.shape != rainy.shape:
            raise DataError(f"{rainy_p} and {clean_p} differ in size")
        pairs.append((rainy, clean))
    return pairs


def _csv_text(header: list[str], rows) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --- subcommands --------------------------------------------------------------


def cmd_params(args) -> int:
    cfg = load_run_config(args.config).net
    net = build_network(cfg)
    print(f"{'layer':<28}{'shape':>18}{'params':>10}")
    for name, value, _ in net.arrays():
        print(f"{name:<28}{'x'.join(map(str, value.shape)):>18}{value.size:>10}")
    print(f"total {count_parameters(net)}")
    return EXIT_OK


def _train_overrides(args) -> dict:
    out = {}
    for key in sorted(CONFIG_KEYS):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = _coerce(key, str(v)) if isinstance(v, str) else v
    return out


def cmd_train(args) -> int:
    run = load_run_config(args.config, _train_overrides(args))
    pairs = load_pairs(args.data)
    for rainy, _ in pairs:
        if min(rainy.shape[2:]) < run.train.patch:
            raise DataError(f"image {rainy.shape[2:]} smaller than patch {run.train.patch}")
    net = build_network(run.net)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    header = ["iter", "lr", "loss", "batch_psnr_db"]
    lines = [",".join(header)]
    print(lines[0], flush=True)
    state = AdamState.for_params([a for _, a, _ in net.arrays()])

    def on_log(row: LogRow) -> None:
        # checkpoint at every log point so a numeric abort leaves the last good one
        line = f"{row.iteration},{row.lr:.6g},{row.loss:.6f},{row.batch_psnr_db:.4f}"
        lines.append(line)
        print(line, flush=True)
        atomic_write(log_path, ("\n".join(lines) + "\n").encode())
        save_checkpoint(net, state, out)

    try:
        train(net, pairs, run.train, state=state, on_log=on_log)
    except NonFiniteError as e:
        print(f"error: {e}; last good checkpoint kept at {out}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(net, state, out)
    atomic_write(log_path, ("\n".join(lines) + "\n").encode())
    return EXIT_OK


STAT_HEADER = ["scope", "block", "pair", "feature", "channel", "mean", "std"]


def redundancy_rows(features: dict[str, np.ndarray]) -> list[list]:
    """Per-channel stats for every first-level fused pair found among the taps."""
    rows = []
    for name, fused in features.items():
        if ".pair" not in name:
            continue
        scope_block, _, pair = name.rpartition(".pair")
        i, j = (int(v) for v in pair.split("_"))
        if scope_block == "across":
            scope, block = "across", ""
            z1, z2 = features[f"block{i}.out"], features[f"block{j}.out"]
        else:
            scope, block = "within", int(scope_block[len("block"):])
            z1, z2 = features[f"{scope_block}.dilated{i}"], features[f"{scope_block}.dilated{j}"]
        stats = feature_stats(z1, z2, fused)
        for kind in ("z1", "z2", "diff", "fused"):
            st = stats[kind]
            for ch, (m, s) in enumerate(zip(st.mean, st.std)):
                rows.append([scope, block, f"{i}-{j}", kind, ch, f"{m:.8g}", f"{s:.8g}"])
    return rows


def _feature_png(z: np.ndarray) -> bytes:
    m = np.abs(z[0]).mean(axis=0)
    span = m.max() - m.min()
    m = (m - m.min()) / span if span > 0 else np.zeros_like(m)
    return encode_png(m[None, None])


def cmd_derain(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    x = load_image(args.inp)
    res = forward(net, x, taps=bool(args.dump_features))
    outputs = {Path(args.out): encode_png(res.y)}
    if args.dump_features:
        d = Path(args.dump_features)
        feats = res.features
        outputs[d / "feature_stats.csv"] = _csv_text(STAT_HEADER, redundancy_rows(feats)).encode()
        for name, z in feats.items():
            if ".pair" in name or name.endswith(".out") or ".dilated" in name:
                outputs[d / f"{name}.png"] = _feature_png(z)
    # everything is computed before the first write
    for path, data in outputs.items():
        atomic_write(path, data)
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    rows, ps, ss = [], [], []
    for clean_p, rainy_p in read_manifest(args.pairs):
        rainy, clean = load_image(rainy_p), load_image(clean_p)
        if rainy.shape != clean.shape:
            raise DataError(f"{rainy_p} and {clean_p} differ in size")
        y = forward(net, rainy).y.astype(np.float64)
        p, s = psnr(y, clean.astype(np.float64)), ssim(y, clean.astype(np.float64))[0]
        ps.append(p)
        ss.append(s)
        rows.append([rainy_p.name, f"{p:.4f}", f"{s:.6f}"])
    rows.append(["mean", f"{np.mean(ps):.4f}", f"{np.mean(ss):.6f}"])
    text = _csv_text(["image", "psnr_db", "ssim"], rows)
    sys.stdout.write(text)
    if args.out:
        atomic_write(args.out, text.encode())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.run_suite(tiny_only=args.tiny)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status} {r.name}: max_rel_err={r.max_rel_err:.3e} (tol {r.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    params = RainParams(args.angle, args.length, args.density, args.intensity, args.seed)
    out = Path(args.out)
    if args.clean_dir:
        paths = sorted(Path(args.clean_dir).glob("*.png"))
        if not paths:
            raise DataError(f"no PNG files in {args.clean_dir}")
        cleans = [(p.stem, load_image(p)) for p in paths]
    else:
        if args.num_synthetic < 1:
            raise UsageError("give --clean-dir or --num-synthetic >= 1")
        cleans = [(f"syn{i:03d}", synthetic_clean(args.size, args.size, args.seed * 1000 + i)) for i in range(args.num_synthetic)]

    files, rows = {}, []
    for i, (stem, clean) in enumerate(cleans):
        p = replace(params, seed=args.seed * 1000 + i)
        rainy = synth_rain(clean, p)
        files[out / "clean" / f"{stem}.png"] = encode_png(clean)
        files[out / "rainy" / f"{stem}.png"] = encode_png(rainy)
        rows.append([f"clean/{stem}.png", f"rainy/{stem}.png", p.angle_deg, p.streak_length_px, p.density, p.intensity, p.seed])
    files[out / "manifest.csv"] = _csv_text(MANIFEST_FIELDS, rows).encode()
    for path, data in files.items():
        atomic_write(path, data)
    print(f"wrote {len(rows)} pairs to {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    net, _ = load_checkpoint(args.ckpt)
    if args.size < 2 * net.config.max_dilation:
        raise UsageError(f"size must be >= {2 * net.config.max_dilation}")
    x = np.random.default_rng(0).random((1, 3, args.size, args.size)).astype(np.float32)
    forward(net, x[:, :, :16, :16])  # warm-up (JIT)
    times = []
    for _ in range(args.runs):
        t = time.perf_counter()
        forward(net, x)
        times.append(time.perf_counter() - t)
    mean = float(np.mean(times))
    if not np.isfinite(mean):
        return EXIT_NUMERIC
    print(f"size={args.size} runs={args.runs} mean_seconds={mean:.4f} std_seconds={np.std(times):.4f}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="treederain", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("params", help="print the parameter count and per-layer table")
    p.add_argument("--config")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train", help="train a network on a dataset manifest")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="manifest CSV")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    for key in sorted(CONFIG_KEYS):
        kind = str if key in ("fusion_mode", "decay_iters", "desk_scale") else (float if key in ("base_lr", "alpha") else int)
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("derain", help="remove rain from one PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-features", metavar="DIR")
    p.set_defaults(func=cmd_derain)

    p = sub.add_parser("eval", help="PSNR/SSIM over a manifest of pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tiny", action="store_true", help="only the tiny-network check")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic rainy dataset")
    p.add_argument("--clean-dir")
    p.add_argument("--num-synthetic", type=int, default=0, help="generate clean images instead of reading them")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--angle", type=float, default=10.0)
    p.add_argument("--length", type=int, default=9)
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--intensity", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="mean single-image inference time")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--runs", type=int, default=10)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (UsageError, ValueError) as e:
        if isinstance(e, (CheckpointError, ImageError)):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
