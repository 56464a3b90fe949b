"""Adam, the step learning-rate schedule, patch sampling and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .losses import LossConfig, combined_loss, psnr
from .network import Network, backward, forward
from .ops import NonFiniteError

log = logging.getLogger(__name__)

Pair = tuple[np.ndarray, np.ndarray]  # (rainy, clean), each (3, H, W) or (1, 3, H, W)


@dataclass
class TrainConfig:
    batch_size: int = 10
    base_lr: float = 1e-3
    decay_iters: tuple[int, ...] = (100_000, 200_000)
    total_iters: int = 300_000
    patch: int = 100
    alpha: float = 0.4
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.decay_iters = tuple(sorted(int(d) for d in self.decay_iters))
        if self.batch_size < 1 or self.patch < 1 or self.total_iters < 0:
            raise ValueError("batch_size and patch must be >= 1, total_iters >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.decay_iters and self.total_iters and self.decay_iters[-1] >= self.total_iters:
            raise ValueError("every decay point must precede total_iters")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Small CPU preset: 500 iterations, batch 4, 64x64 patches, no decay."""
        base = cls(batch_size=4, base_lr=1e-3, decay_iters=(), total_iters=500, patch=64, checkpoint_every=50)
        return replace(base, **overrides)


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """base_lr divided by 10 for every decay point already reached."""
    k = sum(1 for d in cfg.decay_iters if d <= iteration)
    return cfg.base_lr * 10.0 ** (-k)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter array {i}; step aborted")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def _as_chw(img: np.ndarray) -> np.ndarray:
    return img[0] if img.ndim == 4 else img


def sample_patches(pairs: Sequence[Pair], cfg: TrainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch_size`` i.i.d. (image, window) choices; same window for rainy and clean."""
    if not pairs:
        raise ValueError("empty dataset")
    p = cfg.patch
    xs, ys = [], []
    for _ in range(cfg.batch_size):
        rainy, clean = pairs[int(rng.integers(len(pairs)))]
        rainy, clean = _as_chw(rainy), _as_chw(clean)
        _, h, w = clean.shape
        if h < p or w < p:
            raise ValueError(f"image {h}x{w} smaller than patch {p}")
        top = int(rng.integers(h - p + 1))
        left = int(rng.integers(w - p + 1))
        xs.append(rainy[:, top:top + p, left:left + p])
        ys.append(clean[:, top:top + p, left:left + p])
    return np.stack(xs), np.stack(ys)


@dataclass
class LogRow:
    iteration: int
    lr: float
    loss: float
    batch_psnr_db: float


@dataclass
class TrainResult:
    net: Network
    state: AdamState
    log: list[LogRow]
    losses: list[float] = field(default_factory=list)


def train(
    net: Network,
    pairs: Sequence[Pair],
    cfg: TrainConfig,
    state: AdamState | None = None,
    on_log: Callable[[LogRow], None] | None = None,
) -> TrainResult:
    """Train in place with Adam on the MSE+SSIM loss of Y = X - R against the clean patch.

    Every iteration's loss is kept in ``losses``; a ``LogRow`` is emitted every
    ``checkpoint_every`` iterations and after the last one. A non-finite loss
    raises ``NonFiniteError`` before any parameter is touched, so ``net``
    still holds the last good parameters.
    """
    if not pairs:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    loss_cfg = LossConfig(alpha=cfg.alpha)
    arrays = net.arrays()
    params = [a for _, a, _ in arrays]
    grads = [g for _, _, g in arrays]
    state = state or AdamState.for_params(params)
    rows: list[LogRow] = []
    losses: list[float] = []

    for it in range(cfg.total_iters):
        x, y_hat = sample_patches(pairs, cfg, rng)
        x = x.astype(net.dtype, copy=False)
        y_hat = y_hat.astype(net.dtype, copy=False)
        res = forward(net, x, training=True)
        loss, g_y = combined_loss(res.y, y_hat, loss_cfg)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at iteration {it}")
        net.zero_grad()
        backward(net, res.cache, g_y.astype(net.dtype, copy=False))
        lr = lr_schedule(it, cfg)
        adam_step(params, grads, state, lr)
        losses.append(loss)

        if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.total_iters:
            row = LogRow(it + 1, lr, loss, psnr(np.clip(res.y, 0, 1), y_hat))
            rows.append(row)
            log.debug("iter %d lr %.2e loss %.5f psnr %.2f", row.iteration, lr, loss, row.batch_psnr_db)
            if on_log is not None:
                on_log(row)
    return TrainResult(net, state, rows, losses)
