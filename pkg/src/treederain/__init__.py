"""Tree-structured fusion network for single-image deraining, in plain numpy."""
from .losses import LossConfig, SsimConfig, combined_loss, mse, psnr, ssim
from .network import (
    FusionMode,
    Network,
    NetworkConfig,
    backward,
    build_network,
    count_parameters,
    expected_parameter_count,
    feature_stats,
    forward,
    fuse,
    tree_reduce,
)
from .ops import ConvParams, conv2d_backward, conv2d_dilated, grad_check
from .trainer import AdamState, TrainConfig, adam_step, lr_schedule, sample_patches, train

__version__ = "0.1.0"
