"""Deterministic additive rain streaks for desk-scale (rainy, clean) pairs."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .ops import check_tensor


@dataclass(frozen=True)
class RainParams:
    angle_deg: float = 10.0  # measured from vertical, positive leans right going down
    streak_length_px: int = 9
    density: float = 0.5
    intensity: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not -45.0 <= self.angle_deg <= 45.0:
            raise ValueError("angle_deg must lie in [-45, 45]")
        if self.streak_length_px < 1:
            raise ValueError("streak_length_px must be >= 1")
        if not 0.0 <= self.density <= 1.0:
            raise ValueError("density must lie in [0, 1]")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError("intensity must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def line_offsets(length: int, angle_deg: float) -> np.ndarray:
    """Integer (dy, dx) pixels of a rasterised segment starting at the origin."""
    theta = np.deg2rad(angle_deg)
    t = np.arange(length, dtype=np.float64)
    dy = np.rint(t * np.cos(theta)).astype(int)
    dx = np.rint(t * np.sin(theta)).astype(int)
    return np.unique(np.stack([dy, dx], axis=1), axis=0)


def streak_layer(h: int, w: int, p: RainParams) -> np.ndarray:
    """(H, W) nonnegative streak map: Bernoulli seeds stamped with the line kernel."""
    rng = np.random.default_rng(p.seed)
    seeds = rng.random((h, w)) < p.density * 0.01
    layer = np.zeros((h, w), dtype=np.float64)
    ys, xs = np.nonzero(seeds)
    for dy, dx in line_offsets(p.streak_length_px, p.angle_deg):
        ty, tx = ys + dy, xs + dx
        keep = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        np.add.at(layer, (ty[keep], tx[keep]), 1.0)
    return p.intensity * layer


def synth_rain(clean: np.ndarray, p: RainParams, clamp: bool = True) -> np.ndarray:
    """Add identical grey streaks to every channel of ``clean`` (N, 3, H, W)."""
    check_tensor(clean, "clean")
    layer = streak_layer(clean.shape[2], clean.shape[3], p).astype(clean.dtype)
    rainy = clean + layer[None, None]
    return np.clip(rainy, 0.0, 1.0) if clamp else rainy


def synthetic_clean(h: int, w: int, seed: int) -> np.ndarray:
    """A smooth colour background with a few flat shapes, (1, 3, H, W) in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((3, h, w))
    for c in range(3):
        a, b, off = rng.uniform(-0.4, 0.4, size=3)
        img[c] = 0.45 + off * 0.5 + a * yy + b * xx
    for _ in range(4):
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        r = rng.integers(max(2, min(h, w) // 10), max(3, min(h, w) // 4))
        colour = rng.uniform(0.1, 0.8, size=3)
        if rng.random() < 0.5:
            mask = (yy * max(h, w) - cy) ** 2 + (xx * max(h, w) - cx) ** 2 < r**2
        else:
            mask = (np.abs(yy * max(h, w) - cy) < r) & (np.abs(xx * max(h, w) - cx) < r)
        img[:, mask] = colour[:, None]
    return np.clip(img, 0.0, 1.0)[None]


@dataclass
class RainPair:
    rainy: np.ndarray
    clean: np.ndarray
    clean_index: int
    params: RainParams


def make_dataset(
    cleans: Sequence[np.ndarray],
    params_list: Sequence[RainParams],
    rng: np.random.Generator | None = None,
) -> list[RainPair]:
    """One rainy image per (clean, params) combination.

    With ``rng`` given, every pair gets a fresh seed drawn from it (recorded in
    ``pair.params``); otherwise each param set keeps its own seed.
    """
    if not cleans or not params_list:
        raise ValueError("make_dataset needs at least one clean image and one parameter set")
    out = []
    for i, clean in enumerate(cleans):
        for p in params_list:
            if rng is not None:
                p = RainParams(p.angle_deg, p.streak_length_px, p.density, p.intensity, int(rng.integers(2**31)))
            out.append(RainPair(synth_rain(clean, p), clean, i, p))
    return out


def desk_pairs(n: int = 8, size: int = 64, params: RainParams = RainParams(seed=3), seed: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    """The fixed small training set: ``n`` synthetic scenes, one rainy copy each, float32."""
    cleans = [synthetic_clean(size, size, i) for i in range(n)]
    ds = make_dataset(cleans, [params], np.random.default_rng(seed))
    return [(p.rainy.astype(np.float32), p.clean.astype(np.float32)) for p in ds]
