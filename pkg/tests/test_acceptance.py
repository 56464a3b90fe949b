"""The twelve acceptance criteria, each at its stated tolerance, one PASS/FAIL line apiece.

Criteria 7, 8 and 11 share desk-scale training runs (about 20 minutes on one core
in total), so they are marked ``slow``; deselect with ``-m "not slow"``.
"""
import csv
import time

import numpy as np
import pytest
from oracles import direct_conv

from treederain.cli import main
from treederain.experiments import desk_experiment
from treederain.gradcheck import TINY, TOLERANCE, check_loss, check_network
from treederain.io import CheckpointError, checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, save_image
from treederain.losses import LossConfig, combined_loss, mse, ssim
from treederain.network import FusionMode, NetworkConfig, build_network, expected_parameter_count, forward
from treederain.ops import ConvParams, conv2d_dilated
from treederain.rain import desk_pairs
from treederain.trainer import TrainConfig, lr_schedule

MODES = [FusionMode.SUM, FusionMode.ACROSS_ONLY, FusionMode.WITHIN_ONLY, FusionMode.TREE]


@pytest.fixture(scope="module")
def desk_runs():
    """Lazily trained desk-scale variants, shared across criteria 7, 8 and 11."""
    cache = {}

    def get(mode):
        if mode not in cache:
            cache[mode] = desk_experiment(mode)
        return cache[mode]

    return get


def test_c01_parameter_identity(accept, capsys):
    assert main(["params"]) == 0
    printed = capsys.readouterr().out.strip().splitlines()[-1]
    counts = {m: expected_parameter_count(NetworkConfig(fusion_mode=m)) for m in MODES}
    built = {m: sum(a.size for _, a, _ in build_network(NetworkConfig(fusion_mode=m)).arrays()) for m in MODES}
    want = {FusionMode.TREE: 35_427, FusionMode.SUM: 19_059, FusionMode.WITHIN_ONLY: 31_731, FusionMode.ACROSS_ONLY: 22_755}
    ok = printed == "total 35427" and counts == want and built == want
    accept(1, ok, f"params prints '{printed}'; " + ", ".join(f"{m.value}={built[m]}" for m in MODES))
    assert ok


def test_c02_convolution_oracle(accept):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n, ci, co, h, w = (int(v) for v in rng.integers(1, 9, size=5))
        n = min(n, 2)
        d = int(rng.integers(1, 4))
        x = rng.normal(size=(n, ci, h, w))
        p = ConvParams(rng.normal(size=(co, ci, 3, 3)), rng.normal(size=co))
        worst = max(worst, float(np.max(np.abs(conv2d_dilated(x, p, d, d) - direct_conv(x, p.weight, p.bias, d, d)))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 10
    accept(2, ok, f"200 cases, max abs err {worst:.2e} (tol 1e-6), {elapsed:.1f}s (< 10s)")
    assert ok


def test_c03_gradient_suite(accept):
    t0 = time.perf_counter()
    err6 = check_network(TINY, size=6)
    err12 = check_network(TINY, size=12)
    elapsed = time.perf_counter() - t0
    ok = err6 < TOLERANCE and err12 < TOLERANCE and elapsed < 60
    accept(3, ok, f"tiny net max rel err 6x6 {err6:.2e}, 12x12 {err12:.2e} (tol 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


def test_c04_residual_identity(accept):
    rng = np.random.default_rng(4)
    net = build_network(NetworkConfig(seed=4))
    net.reconstruct.weight[...] = 0
    net.reconstruct.bias[...] = 0
    exact = 0
    for _ in range(10):
        x = rng.random((1, 3, 24, 24)).astype(np.float32)
        exact += bool(np.array_equal(forward(net, x).y, x))
    accept(4, exact == 10, f"{exact}/10 inputs reproduced bit-exactly")
    assert exact == 10


def test_c05_ssim(accept):
    rng = np.random.default_rng(5)
    x, y = rng.random((1, 3, 32, 32)), rng.random((1, 3, 32, 32))
    self_err = abs(ssim(x, x)[0] - 1)
    sym = abs(ssim(x, y)[0] - ssim(y, x)[0])
    grad = check_loss("ssim")
    ok = self_err <= 1e-9 and sym < 1e-12 and grad < 1e-4
    accept(5, ok, f"|ssim(x,x)-1|={self_err:.1e}, asymmetry {sym:.1e}, grad rel err {grad:.2e}")
    assert ok


def test_c06_loss_endpoints(accept):
    rng = np.random.default_rng(6)
    y, t = rng.random((2, 3, 20, 20)), rng.random((2, 3, 20, 20))
    m, s = mse(y, t)[0], ssim(y, t)[0]
    e1 = abs(combined_loss(y, t, LossConfig(alpha=1.0))[0] - m)
    e0 = abs(combined_loss(y, t, LossConfig(alpha=0.0))[0] - (1 - s))
    e4 = abs(combined_loss(y, t, LossConfig(alpha=0.4))[0] - (0.4 * m + 0.6 * (1 - s)))
    ok = e1 <= 1e-9 and e0 <= 1e-9 and e4 <= 1e-9 and LossConfig().alpha == 0.4
    accept(6, ok, f"alpha=1 err {e1:.1e}, alpha=0 err {e0:.1e}, alpha=0.4 err {e4:.1e}")
    assert ok


@pytest.mark.slow
def test_c07_desk_training(accept, desk_runs):
    r = desk_runs(FusionMode.TREE)
    ok = r.loss_ratio <= 0.5 and r.psnr_gain_db >= 1.0
    accept(
        7,
        ok,
        f"loss {r.initial_loss:.4f} -> {r.final_loss:.4f} (ratio {r.loss_ratio:.3f} <= 0.5); "
        f"PSNR rainy {r.psnr_rainy_db:.2f} dB -> derained {r.psnr_derained_db:.2f} dB "
        f"(+{r.psnr_gain_db:.2f} >= 1); {r.seconds:.0f}s",
    )
    assert ok


@pytest.mark.slow
def test_c08_fusion_ordering(accept, desk_runs):
    results = [desk_runs(m) for m in MODES]
    reporter_lines = ["variant        params  final_loss  psnr_db  seconds"]
    for r in results:
        reporter_lines.append(f"{r.mode.value:<13}{r.params:>8}  {r.final_loss:10.4f}  {r.psnr_derained_db:7.2f}  {r.seconds:7.0f}")
    print("\n".join(reporter_lines))
    finite = all(np.isfinite(r.final_loss) and np.isfinite(r.psnr_derained_db) for r in results)
    counts = [r.params for r in results]
    tree_max = counts[-1] == max(counts) and counts == sorted(counts)
    ok = finite and tree_max
    accept(8, ok, "; ".join(f"{r.mode.value} {r.params} params loss {r.final_loss:.4f}" for r in results))
    assert ok


def test_c09_schedule(accept):
    cfg = TrainConfig()
    got = [lr_schedule(i, cfg) for i in (0, 100_000, 200_000)]
    ok = all(abs(g - w) <= 1e-12 * w for g, w in zip(got, (1e-3, 1e-4, 1e-5)))
    accept(9, ok, "lr at 0/100K/200K = " + " / ".join(f"{g:g}" for g in got))
    assert ok


def test_c10_checkpoint_round_trip(accept, tmp_path):
    rng = np.random.default_rng(10)
    net = build_network(NetworkConfig(seed=10))
    for _, a, _ in net.arrays():
        a += rng.normal(0, 0.01, size=a.shape).astype(a.dtype)
    save_checkpoint(net, None, tmp_path / "n.ckpt")
    back, _ = load_checkpoint(tmp_path / "n.ckpt")
    x = rng.random((1, 3, 32, 32)).astype(np.float32)
    identical = bool(np.array_equal(forward(back, x).y, forward(net, x).y))
    data = bytearray(checkpoint_bytes(net))
    data[len(data) // 2] ^= 0x01
    try:
        checkpoint_from_bytes(bytes(data))
        rejected = False
    except CheckpointError:
        rejected = True
    ok = identical and rejected
    accept(10, ok, f"forward bit-identical after reload: {identical}; flipped byte rejected: {rejected}")
    assert ok


@pytest.mark.slow
def test_c11_redundancy_statistics(accept, desk_runs, tmp_path):
    net = desk_runs(FusionMode.TREE).net
    save_checkpoint(net, None, tmp_path / "tree.ckpt")
    save_image(desk_pairs()[0][0], tmp_path / "rainy.png")
    code = main(["derain", "--ckpt", str(tmp_path / "tree.ckpt"), "--in", str(tmp_path / "rainy.png"),
                 "--out", str(tmp_path / "out.png"), "--dump-features", str(tmp_path / "feat")])
    with open(tmp_path / "feat" / "feature_stats.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    cfg = net.config
    pairs = cfg.num_blocks * (cfg.max_dilation // 2) + cfg.num_blocks // 2
    expected = pairs * 4 * cfg.channels
    values = np.array([[float(r["mean"]), float(r["std"])] for r in rows])
    kinds = {r["feature"] for r in rows}
    ok = (
        code == 0
        and len(rows) == expected
        and kinds == {"z1", "z2", "diff", "fused"}
        and np.all(np.isfinite(values))
        and np.all(values[:, 1] >= 0)
    )
    accept(11, ok, f"{len(rows)} rows (expected {expected}: {pairs} pairs x 4 features x {cfg.channels} ch), finite, std >= 0")
    assert ok


def test_c12_inference_timing(accept, tmp_path, capsys):
    save_checkpoint(build_network(NetworkConfig()), None, tmp_path / "d.ckpt")
    code = main(["bench", "--ckpt", str(tmp_path / "d.ckpt"), "--size", "512", "--runs", "3"])
    out = capsys.readouterr().out
    mean = float(out.split("mean_seconds=")[1].split()[0]) if "mean_seconds=" in out else float("nan")
    ok = code == 0 and np.isfinite(mean)
    accept(12, ok, f"512x512 mean inference {mean:.3f}s over 3 runs")
    assert ok
