"""The fixed small-scale training protocol shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import psnr
from .network import FusionMode, Network, NetworkConfig, build_network, count_parameters, forward
from .rain import desk_pairs
from .trainer import TrainConfig, TrainResult, train

WINDOW = 50  # iterations averaged at each end of the loss curve


@dataclass
class DeskResult:
    mode: FusionMode
    params: int
    initial_loss: float
    final_loss: float
    psnr_rainy_db: float
    psnr_derained_db: float
    seconds: float
    net: Network
    run: TrainResult

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.initial_loss

    @property
    def psnr_gain_db(self) -> float:
        return self.psnr_derained_db - self.psnr_rainy_db


def desk_experiment(mode: FusionMode | str = FusionMode.TREE, total_iters: int = 500, seed: int = 0, on_log=None) -> DeskResult:
    """Train one fusion variant on the eight synthetic 64x64 pairs and score it on them."""
    mode = FusionMode(mode)
    pairs = desk_pairs()
    net = build_network(NetworkConfig(fusion_mode=mode, seed=seed))
    cfg = TrainConfig.desk_scale(total_iters=total_iters, seed=seed)
    t0 = time.perf_counter()
    run = train(net, pairs, cfg, on_log=on_log)
    seconds = time.perf_counter() - t0
    w = min(WINDOW, max(1, len(run.losses)))
    derained = [psnr(forward(net, x).y, c) for x, c in pairs]
    rainy = [psnr(x, c) for x, c in pairs]
    return DeskResult(
        mode,
        count_parameters(net),
        float(np.mean(run.losses[:w])),
        float(np.mean(run.losses[-w:])),
        float(np.mean(rainy)),
        float(np.mean(derained)),
        seconds,
        net,
        run,
    )
