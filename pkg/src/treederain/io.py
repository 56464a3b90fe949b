"""PNG images and binary checkpoints.

Checkpoint layout (little-endian)::

    b"TDFN"  u32 version
    u32 len, utf-8 config text ("key=value" lines)
    u32 tensor count, then per tensor:
        u16 len, utf-8 name; u8 ndim; ndim x u32 dims; float32 data (row-major)
    u8 has_adam; if 1: u64 step, 3 x f64 (beta1, beta2, eps),
        then per tensor, in the same order: float32 m, float32 v
    u32 CRC-32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import fields
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image

from .network import FusionMode, Network, NetworkConfig, build_network
from .trainer import AdamState

MAGIC = b"TDFN"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ImageError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- images ---------------------------------------------------------------


def image_to_tensor(img: Image.Image) -> np.ndarray:
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise ImageError(f"unsupported bit depth (mode {img.mode})")
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.uint8)[..., None].repeat(3, axis=2)
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return (arr.transpose(2, 0, 1)[None].astype(np.float64) / 255.0).astype(np.float32)


def tensor_to_image(x: np.ndarray) -> Image.Image:
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ImageError("can only encode a single image")
        x = x[0]
    if x.shape[0] == 1:
        x = np.repeat(x, 3, axis=0)
    if x.shape[0] != 3:
        raise ImageError(f"expected 1 or 3 channels, got {x.shape[0]}")
    # round half up
    q = np.floor(np.clip(np.asarray(x, np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return Image.fromarray(q.transpose(1, 2, 0), mode="RGB")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """PNG -> float32 (1, 3, H, W) in [0, 1]; grey images are replicated."""
    try:
        with Image.open(path) as img:
            img.load()
            return image_to_tensor(img)
    except (OSError, Image.UnidentifiedImageError) as e:
        raise ImageError(f"cannot read image {path}: {e}") from e


def encode_png(x: np.ndarray) -> bytes:
    buf = BytesIO()
    tensor_to_image(x).save(buf, format="PNG")
    return buf.getvalue()


def save_image(x: np.ndarray, path: str | os.PathLike) -> None:
    atomic_write(path, encode_png(x))


# --- config text ------------------------------------------------------------


def config_to_text(cfg: NetworkConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())


def config_from_text(text: str) -> NetworkConfig:
    known = {f.name: f.type for f in fields(NetworkConfig)}
    kw = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise CheckpointError(f"unknown config key in checkpoint: {key}")
        kw[key] = FusionMode(value.strip()) if key == "fusion_mode" else int(value)
    return NetworkConfig(**kw)


# --- checkpoints ------------------------------------------------------------


def checkpoint_bytes(net: Network, state: AdamState | None = None) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = config_to_text(net.config).encode()
    out += struct.pack("<I", len(cfg)) + cfg
    arrays = net.arrays()
    out += struct.pack("<I", len(arrays))
    for name, value, _ in arrays:
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f4").tobytes()
    if state is None:
        out += b"\x00"
    else:
        if len(state.m) != len(arrays):
            raise CheckpointError("optimizer state does not match the network")
        out += b"\x01" + struct.pack("<Q3d", state.step, state.beta1, state.beta2, state.eps)
        for m, v in zip(state.m, state.v):
            out += np.ascontiguousarray(m, dtype="<f4").tobytes()
            out += np.ascontiguousarray(v, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)


def checkpoint_from_bytes(data: bytes, dtype=np.float32) -> tuple[Network, AdamState | None]:
    """Parse and verify a checkpoint; values are widened to ``dtype``."""
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    cfg = config_from_text(r.take(n).decode())
    net = build_network(cfg, dtype=dtype)
    arrays = net.arrays()
    (count,) = r.unpack("<I")
    if count != len(arrays):
        raise CheckpointError(f"checkpoint has {count} tensors, config implies {len(arrays)}")
    for name, value, _ in arrays:
        (ln,) = r.unpack("<H")
        got = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        if got != name or tuple(dims) != value.shape:
            raise CheckpointError(f"tensor {got}{dims} does not match expected {name}{value.shape}")
        value[...] = r.floats(value.shape)
    (has_adam,) = r.unpack("<B")
    state = None
    if has_adam:
        step, b1, b2, eps = r.unpack("<Q3d")
        ms, vs = [], []
        for _, value, _ in arrays:
            ms.append(r.floats(value.shape).astype(dtype))
            vs.append(r.floats(value.shape).astype(dtype))
        state = AdamState(ms, vs, step, b1, b2, eps)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return net, state


def save_checkpoint(net: Network, state: AdamState | None, path: str | os.PathLike) -> None:
    atomic_write(path, checkpoint_bytes(net, state))


def load_checkpoint(path: str | os.PathLike, dtype=np.float32) -> tuple[Network, AdamState | None]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return checkpoint_from_bytes(data, dtype)
