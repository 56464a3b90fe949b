"""MSE, Gaussian-window SSIM with analytic gradient, the MSE+SSIM training loss, PSNR."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import ShapeError

PSNR_CAP_DB = 99.0


def _same_shape(y: np.ndarray, y_hat: np.ndarray) -> None:
    if y.shape != y_hat.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {y_hat.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """1-D normalised Gaussian; the 2-D window is its outer product."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    window_1d: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "window_1d", gaussian_window(self.window_size, self.sigma))

    @property
    def window(self) -> np.ndarray:
        return np.outer(self.window_1d, self.window_1d)

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.4
    ssim: SsimConfig = field(default_factory=SsimConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def mse(y: np.ndarray, y_hat: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``y``."""
    _same_shape(y, y_hat)
    diff = y - y_hat
    return float(np.mean(diff * diff, dtype=np.float64)), (2.0 / diff.size) * diff


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-region correlation over the last two axes."""
    k = g.size
    g = g.astype(img.dtype, copy=False)
    h = np.lib.stride_tricks.sliding_window_view(img, k, axis=-2) @ g
    return np.lib.stride_tricks.sliding_window_view(h, k, axis=-1) @ g


def _filter_adjoint(m: np.ndarray, g: np.ndarray) -> np.ndarray:
    # adjoint of valid correlation = full correlation with the flipped window
    k = g.size
    pad = [(0, 0)] * (m.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
    return _filter_valid(np.pad(m, pad), g[::-1])


def ssim(y: np.ndarray, y_hat: np.ndarray, cfg: SsimConfig | None = None) -> tuple[float, np.ndarray]:
    """Mean SSIM over batch, channels and valid window positions, plus d/dy.

    Local statistics use the Gaussian window without padding, per channel.
    """
    cfg = cfg or SsimConfig()
    _same_shape(y, y_hat)
    k = cfg.window_size
    if y.ndim < 2 or y.shape[-1] < k or y.shape[-2] < k:
        raise ShapeError(f"image {y.shape[-2:]} smaller than the {k}x{k} SSIM window")
    g = cfg.window_1d
    c1, c2 = cfg.c1, cfg.c2
    x, t = y, y_hat

    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(t, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(t * t, g) - mu_y * mu_y
    cov = _filter_valid(x * t, g) - mu_x * mu_y

    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * cov + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = var_x + var_y + c2
    smap = (a1 * a2) / (b1 * b2)
    value = float(np.mean(smap, dtype=np.float64))

    # partials of the map w.r.t. the local statistics of x, scaled by the mean
    scale = 1.0 / smap.size
    d_mu = scale * (2 * mu_y * a2 / (b1 * b2) - 2 * mu_x * smap / b1)
    d_var = scale * (-smap / b2)
    d_cov = scale * (2 * a1 / (b1 * b2))
    grad = (
        _filter_adjoint(d_mu - 2 * mu_x * d_var - mu_y * d_cov, g)
        + 2 * x * _filter_adjoint(d_var, g)
        + t * _filter_adjoint(d_cov, g)
    )
    return value, grad


def combined_loss(y: np.ndarray, y_hat: np.ndarray, cfg: LossConfig | None = None) -> tuple[float, np.ndarray]:
    """alpha * MSE + (1 - alpha) * (1 - SSIM), batch-averaged, with d/dy."""
    cfg = cfg or LossConfig()
    a = cfg.alpha
    m, gm = mse(y, y_hat)
    if a == 1.0:
        return m, gm
    s, gs = ssim(y, y_hat, cfg.ssim)
    return a * m + (1 - a) * (1 - s), a * gm - (1 - a) * gs


def psnr(y: np.ndarray, y_hat: np.ndarray) -> float:
    """PSNR in dB for unit dynamic range; identical inputs give PSNR_CAP_DB."""
    _same_shape(y, y_hat)
    err = float(np.mean((np.asarray(y, np.float64) - np.asarray(y_hat, np.float64)) ** 2))
    if err == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / err))
