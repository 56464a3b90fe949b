"""Finite-difference checks of every hand-written backward pass (64-bit)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, SsimConfig, combined_loss, mse, ssim
from .network import FusionMode, Network, NetworkConfig, backward, build_network, forward
from .ops import ConvParams, conv2d_backward, conv2d_dilated, grad_check, relu, relu_backward

TOLERANCE = 1e-4
EPSILON = 1e-5
# SSIM-only checks use a wider step: corner pixels carry ~1e-8 gradients that
# 1e-5 differences cannot resolve above roundoff
SSIM_EPSILON = 1e-4
TINY = NetworkConfig(num_blocks=2, max_dilation=2, channels=4, seed=7)
TINY_SSIM = SsimConfig(window_size=5, sigma=1.5)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tolerance)


def network_loss_fn(net: Network, x: np.ndarray, target: np.ndarray, loss_cfg: LossConfig):
    """Closure returning (loss, [grad per array of net.arrays()]) at the current parameters."""
    grads = [g for _, _, g in net.arrays()]

    def fn():
        net.zero_grad()
        res = forward(net, x, training=True)
        loss, g_y = combined_loss(res.y, target, loss_cfg)
        backward(net, res.cache, g_y)
        return loss, grads

    return fn


def check_network(
    config: NetworkConfig = TINY,
    size: int = 6,
    loss_cfg: LossConfig | None = None,
    seed: int = 0,
    epsilon: float = EPSILON,
) -> float:
    """Max relative gradient error over every parameter scalar of a float64 network."""
    loss_cfg = loss_cfg or LossConfig(alpha=0.4, ssim=TINY_SSIM if size < 11 else SsimConfig())
    rng = np.random.default_rng(seed)
    net = build_network(config, dtype=np.float64)
    for _, p in net.named_params():
        p.bias[...] = rng.normal(0.0, 0.05, size=p.bias.shape)
    x = rng.random((1, config.input_channels, size, size))
    target = rng.random(x.shape)
    return grad_check(network_loss_fn(net, x, target, loss_cfg), [a for _, a, _ in net.arrays()], epsilon)


def check_conv(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    p = ConvParams(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
    x = rng.normal(size=(1, 2, 4, 4))
    w_out = rng.normal(size=(1, 2, 4, 4))

    def fn():
        p.zero_grad()
        out = conv2d_dilated(x, p, 2, 2)
        gx = conv2d_backward(x, p, 2, 2, w_out)
        return float(np.sum(out * w_out)), [gx, p.grad_weight, p.grad_bias]

    return grad_check(fn, [x, p.weight, p.bias])


def check_relu(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep clear of the kink
    w_out = rng.normal(size=x.shape)

    def fn():
        return float(np.sum(relu(x) * w_out)), [relu_backward(x, w_out)]

    return grad_check(fn, [x])


def check_loss(which: str, seed: int = 0, size: int = 16) -> float:
    rng = np.random.default_rng(seed)
    y = rng.random((1, 3, size, size))
    t = rng.random(y.shape)
    f = {"mse": mse, "ssim": ssim, "combined": combined_loss}[which]
    eps = SSIM_EPSILON if which == "ssim" else EPSILON

    def fn():
        v, g = f(y, t)
        return v, [g]

    return grad_check(fn, [y], eps)


def run_suite(tiny_only: bool = False) -> list[CheckResult]:
    results = [CheckResult("tiny network 6x6 (2 blocks, DF 2, 4 ch, alpha 0.4)", check_network())]
    if tiny_only:
        return results
    results.append(CheckResult("tiny network 12x12, 11x11 SSIM window", check_network(size=12)))
    for mode in (FusionMode.SUM, FusionMode.WITHIN_ONLY, FusionMode.ACROSS_ONLY):
        cfg = NetworkConfig(num_blocks=3, max_dilation=3, channels=3, fusion_mode=mode, seed=3)
        results.append(CheckResult(f"network fusion_mode={mode.value}", check_network(cfg, size=8)))
    results.append(CheckResult("conv2d dilation 2", check_conv()))
    results.append(CheckResult("relu", check_relu()))
    for which in ("mse", "ssim", "combined"):
        results.append(CheckResult(f"loss {which}", check_loss(which)))
    return results
