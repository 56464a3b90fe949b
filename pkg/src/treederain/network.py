"""Tree-structured fusion deraining network.

Layout: 3x3 feature extraction, ``num_blocks`` dilated blocks (one shared 3x3
kernel applied at dilations 1..max_dilation, fused by a pairwise tree, plus a
skip connection), an optional fusion tree over all block outputs, and a 1x1
reconstruction layer that predicts the rain residual R so that Y = X - R.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .ops import (
    DEFAULT_DTYPE,
    ConvParams,
    ShapeError,
    check_tensor,
    concat_backward,
    concat_channels,
    conv2d_backward,
    conv2d_dilated,
    relu,
    relu_backward,
)


class FusionMode(str, Enum):
    TREE = "tree"
    SUM = "sum"
    WITHIN_ONLY = "within_only"
    ACROSS_ONLY = "across_only"

    @property
    def within(self) -> bool:
        return self in (FusionMode.TREE, FusionMode.WITHIN_ONLY)

    @property
    def across(self) -> bool:
        return self in (FusionMode.TREE, FusionMode.ACROSS_ONLY)


@dataclass(frozen=True)
class NetworkConfig:
    num_blocks: int = 8
    max_dilation: int = 4
    channels: int = 16
    fusion_mode: FusionMode = FusionMode.TREE
    input_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fusion_mode", FusionMode(self.fusion_mode))
        for name in ("num_blocks", "max_dilation", "channels", "input_channels"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_mode"] = self.fusion_mode.value
        return d


@dataclass
class BlockParams:
    shared_conv: ConvParams
    within_fuse: list[ConvParams] = field(default_factory=list)


@dataclass
class Network:
    config: NetworkConfig
    extract: ConvParams
    blocks: list[BlockParams]
    cross_fuse: list[ConvParams]
    reconstruct: ConvParams

    def named_params(self) -> list[tuple[str, ConvParams]]:
        """Stable, ordered (name, params) listing used by optimizers and checkpoints."""
        out = [("extract", self.extract)]
        for b, block in enumerate(self.blocks):
            out.append((f"block{b}.shared_conv", block.shared_conv))
            out.extend((f"block{b}.within_fuse{i}", p) for i, p in enumerate(block.within_fuse))
        out.extend((f"cross_fuse{i}", p) for i, p in enumerate(self.cross_fuse))
        out.append(("reconstruct", self.reconstruct))
        return out

    def arrays(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """Flat (name, value, grad) triples, weight before bias for every layer."""
        out = []
        for name, p in self.named_params():
            out.append((f"{name}.weight", p.weight, p.grad_weight))
            out.append((f"{name}.bias", p.bias, p.grad_bias))
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()

    @property
    def dtype(self):
        return self.extract.weight.dtype

    def astype(self, dtype) -> "Network":
        return Network(
            self.config,
            self.extract.astype(dtype),
            [BlockParams(b.shared_conv.astype(dtype), [p.astype(dtype) for p in b.within_fuse]) for b in self.blocks],
            [p.astype(dtype) for p in self.cross_fuse],
            self.reconstruct.astype(dtype),
        )


def _init_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype) -> ConvParams:
    std = np.sqrt(2.0 / (c_in * k * k))
    w = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)
    return ConvParams(w, np.zeros(c_out, dtype=dtype))


def build_network(config: NetworkConfig, dtype=DEFAULT_DTYPE) -> Network:
    """Allocate and He-initialise every layer; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    c, cin = config.channels, config.input_channels
    mode = config.fusion_mode

    extract = _init_conv(rng, c, cin, 3, dtype)
    blocks = []
    for _ in range(config.num_blocks):
        shared = _init_conv(rng, c, c, 3, dtype)
        n_fuse = config.max_dilation - 1 if mode.within else 0
        blocks.append(BlockParams(shared, [_init_conv(rng, c, 2 * c, 1, dtype) for _ in range(n_fuse)]))
    n_cross = config.num_blocks - 1 if mode.across else 0
    cross = [_init_conv(rng, c, 2 * c, 1, dtype) for _ in range(n_cross)]
    reconstruct = _init_conv(rng, cin, c, 1, dtype)
    return Network(config, extract, blocks, cross, reconstruct)


def count_parameters(net: Network) -> int:
    return sum(p.size for _, p in net.named_params())


def expected_parameter_count(config: NetworkConfig) -> int:
    """Closed-form parameter total for a config (independent of build_network)."""
    c, b, d, cin = config.channels, config.num_blocks, config.max_dilation, config.input_channels
    w = int(config.fusion_mode.within)
    a = int(config.fusion_mode.across)
    fuse = 2 * c * c + c
    return (cin * c * 9 + c) + b * (c * c * 9 + c + w * (d - 1) * fuse) + a * (b - 1) * fuse + (c * cin + cin)


# --- fusion --------------------------------------------------------------


@dataclass
class FuseCache:
    z1: np.ndarray
    z2: np.ndarray
    cat: np.ndarray
    pre: np.ndarray


def fuse(z1: np.ndarray, z2: np.ndarray, params: ConvParams, cache: list | None = None) -> np.ndarray:
    """relu(1x1 conv(concat(z1, z2))); output has z1's shape."""
    if z1.shape != z2.shape:
        raise ShapeError(f"fuse operands differ: {z1.shape} vs {z2.shape}")
    if params.kernel_size != 1 or params.c_in != 2 * z1.shape[1] or params.c_out != z1.shape[1]:
        raise ShapeError(f"fuse kernel {params.weight.shape} incompatible with features {z1.shape}")
    cat = concat_channels(z1, z2)
    pre = conv2d_dilated(cat, params, dilation=1, padding=0)
    if cache is not None:
        cache.append(FuseCache(z1, z2, cat, pre))
    return relu(pre)


def fuse_backward(c: FuseCache, params: ConvParams, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g_pre = relu_backward(c.pre, grad_out)
    g_cat = conv2d_backward(c.cat, params, 1, 0, g_pre)
    return concat_backward(g_cat, c.z1.shape[1])


@dataclass
class TreeCache:
    # per level: (kind, payload); "fuse" -> (left, right, param index, FuseCache), "carry" -> index
    levels: list = field(default_factory=list)
    n_leaves: int = 0


def tree_reduce(
    features: Sequence[np.ndarray],
    fuse_params: Sequence[ConvParams],
    cache: TreeCache | None = None,
) -> np.ndarray:
    """Reduce features by fusing adjacent pairs level by level.

    Pairs (0,1), (2,3), ... are fused at each level; an odd trailing feature is
    carried up unchanged. ``fuse_params`` are consumed level by level, left to
    right, and there must be exactly ``len(features) - 1`` of them.
    """
    n = len(features)
    if n < 1:
        raise ValueError("tree_reduce needs at least one feature")
    if len(fuse_params) != n - 1:
        raise ValueError(f"{n} features need {n - 1} fuse layers, got {len(fuse_params)}")
    for f in features[1:]:
        if f.shape != features[0].shape:
            raise ShapeError("tree_reduce features must be shape-identical")
    if cache is not None:
        cache.n_leaves = n

    level = list(features)
    k = 0
    while len(level) > 1:
        nxt, record = [], []
        for i in range(0, len(level) - 1, 2):
            fc: list = []
            nxt.append(fuse(level[i], level[i + 1], fuse_params[k], fc))
            record.append(("fuse", (i, i + 1, k, fc[0])))
            k += 1
        if len(level) % 2:
            nxt.append(level[-1])
            record.append(("carry", len(level) - 1))
        if cache is not None:
            cache.levels.append(record)
        level = nxt
    return level[0]


def tree_reduce_backward(cache: TreeCache, fuse_params: Sequence[ConvParams], grad_root: np.ndarray) -> list[np.ndarray]:
    grads = [grad_root]
    for record in reversed(cache.levels):
        width = sum(2 if kind == "fuse" else 1 for kind, _ in record)
        below: list = [None] * width
        for slot, (kind, payload) in enumerate(record):
            g = grads[slot]
            if kind == "carry":
                below[payload] = g
            else:
                i, j, k, fc = payload
                below[i], below[j] = fuse_backward(fc, fuse_params[k], g)
        grads = below
    assert len(grads) == cache.n_leaves
    return grads


def _sum_features(features: Sequence[np.ndarray]) -> np.ndarray:
    out = features[0].copy()
    for f in features[1:]:
        out += f
    return out


# --- blocks and full network ---------------------------------------------


@dataclass
class BlockCache:
    f_prev: np.ndarray
    dilated: list[np.ndarray]
    cols: list[np.ndarray]
    tree: TreeCache | None
    pre: np.ndarray


def block_forward(
    f_prev: np.ndarray,
    block: BlockParams,
    config: NetworkConfig,
    cache: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One dilated block. Returns (block output, fused multi-scale feature)."""
    if f_prev.shape[1] != config.channels:
        raise ShapeError(f"block input has {f_prev.shape[1]} channels, expected {config.channels}")
    cols: list | None = [] if cache is not None else None
    dilated = [conv2d_dilated(f_prev, block.shared_conv, d, d, cols) for d in range(1, config.max_dilation + 1)]
    tree = None
    if config.fusion_mode.within:
        tree = TreeCache() if cache is not None else None
        fused = tree_reduce(dilated, block.within_fuse, tree)
    else:
        fused = _sum_features(dilated)
    pre = fused + f_prev
    if cache is not None:
        cache.append(BlockCache(f_prev, dilated, cols, tree, pre))
    return relu(pre), fused


def block_backward(c: BlockCache, block: BlockParams, config: NetworkConfig, grad_out: np.ndarray) -> np.ndarray:
    g_pre = relu_backward(c.pre, grad_out)
    if c.tree is not None:
        g_dilated = tree_reduce_backward(c.tree, block.within_fuse, g_pre)
    else:
        g_dilated = [g_pre] * len(c.dilated)
    g_prev = g_pre.copy()
    for d, g, cols in zip(range(1, config.max_dilation + 1), g_dilated, c.cols):
        g_prev += conv2d_backward(c.f_prev, block.shared_conv, d, d, g, cols)
    return g_prev


@dataclass
class ForwardCache:
    x: np.ndarray
    extract_pre: np.ndarray
    blocks: list[BlockCache]
    cross: TreeCache | None
    recon_in: np.ndarray


@dataclass
class ForwardResult:
    y: np.ndarray
    r: np.ndarray
    features: dict[str, np.ndarray]
    cache: ForwardCache | None = None


def forward(
    net: Network,
    x: np.ndarray,
    taps: bool = False,
    training: bool = False,
) -> ForwardResult:
    """Run the network on ``x`` (N, 3, H, W).

    ``training`` keeps the cache needed by :func:`backward` and leaves Y
    unclamped; at inference Y is clamped to [0, 1]. With ``taps`` the
    intermediate features are returned by name:

    - ``block{b}.dilated{d}``: pre-activation dilated conv output at dilation d
    - ``block{b}.pair{i}_{j}``: first-level fusion of dilations i and j
    - ``block{b}.fused``: within-block fusion result
    - ``block{b}.out``: block output after skip + ReLU
    - ``across.pair{i}_{j}``: first-level fusion of block outputs i and j
    - ``recon_in``: input to the reconstruction layer
    """
    check_tensor(x, "x")
    cfg = net.config
    if x.shape[1] != cfg.input_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, network expects {cfg.input_channels}")
    x = x.astype(net.dtype, copy=False)
    features: dict[str, np.ndarray] = {}

    extract_pre = conv2d_dilated(x, net.extract, 1, 1)
    f = relu(extract_pre)
    keep = training or taps
    block_caches: list[BlockCache] | None = [] if keep else None
    outputs = []
    for b, block in enumerate(net.blocks):
        f, fused = block_forward(f, block, cfg, block_caches)
        outputs.append(f)
        if taps:
            bc = block_caches[-1]
            for d, fd in enumerate(bc.dilated, start=1):
                features[f"block{b}.dilated{d}"] = fd
            if bc.tree is not None:
                _tap_pairs(features, f"block{b}.pair", bc.tree, offset=1)
            features[f"block{b}.fused"] = fused
            features[f"block{b}.out"] = f

    cross = None
    if cfg.fusion_mode.across:
        cross = TreeCache() if keep else None
        recon_in = tree_reduce(outputs, net.cross_fuse, cross)
        if taps:
            _tap_pairs(features, "across.pair", cross, offset=0)
    else:
        recon_in = outputs[-1]
    if taps:
        features["recon_in"] = recon_in

    r = conv2d_dilated(recon_in, net.reconstruct, 1, 0)
    y = x - r
    if not training:
        y = np.clip(y, 0.0, 1.0)
    cache = ForwardCache(x, extract_pre, block_caches, cross, recon_in) if training else None
    return ForwardResult(y, r, features, cache)


def _tap_pairs(features: dict, prefix: str, tree: TreeCache, offset: int) -> None:
    if not tree.levels:
        return
    for kind, payload in tree.levels[0]:
        if kind == "fuse":
            i, j, _, fc = payload
            features[f"{prefix}{i + offset}_{j + offset}"] = relu(fc.pre)


def backward(net: Network, cache: ForwardCache, grad_y: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients given dL/dY; returns dL/dX."""
    cfg = net.config
    grad_r = -grad_y
    g_recon = conv2d_backward(cache.recon_in, net.reconstruct, 1, 0, grad_r)

    n_blocks = len(cache.blocks)
    if cache.cross is not None:
        g_outputs = tree_reduce_backward(cache.cross, net.cross_fuse, g_recon)
    else:
        g_outputs = [None] * (n_blocks - 1) + [g_recon]

    g = None
    for b in range(n_blocks - 1, -1, -1):
        g_b = g_outputs[b]
        if g is None:
            g = g_b
        elif g_b is not None:
            g = g + g_b
        g = block_backward(cache.blocks[b], net.blocks[b], cfg, g)

    g_extract = relu_backward(cache.extract_pre, g)
    g_x = conv2d_backward(cache.x, net.extract, 1, 1, g_extract)
    return grad_y + g_x


# --- redundancy statistics ----------------------------------------------


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


def channel_stats(z: np.ndarray) -> FeatureStats:
    check_tensor(z)
    return FeatureStats(z.mean(axis=(0, 2, 3)), z.std(axis=(0, 2, 3)))


def feature_stats(z1: np.ndarray, z2: np.ndarray, fused: np.ndarray) -> dict[str, FeatureStats]:
    """Per-channel mean/std of two adjacent features, their difference, and the fused feature."""
    if not (z1.shape == z2.shape == fused.shape):
        raise ShapeError(f"feature_stats needs identical shapes, got {z1.shape}, {z2.shape}, {fused.shape}")
    return {
        "z1": channel_stats(z1),
        "z2": channel_stats(z2),
        "diff": channel_stats(z1 - z2),
        "fused": channel_stats(fused),
    }
