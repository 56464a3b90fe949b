"""Dense NCHW kernels: dilated convolution, ReLU, channel concat, add.

Tensors are plain 4-D numpy arrays (batch, channel, height, width). Every
kernel has a matching backward that is written by hand; the network's
topology is static so no tape is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numba
import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64


class ShapeError(ValueError):
    pass


def check_tensor(x: np.ndarray, name: str = "tensor") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")


@dataclass
class ConvParams:
    """Weight (C_out, C_in, k, k), bias (C_out,) and their gradient accumulators."""

    weight: np.ndarray
    bias: np.ndarray
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"weight must be (C_out, C_in, k, k), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    @classmethod
    def zeros(cls, c_out: int, c_in: int, k: int, dtype=DEFAULT_DTYPE) -> "ConvParams":
        return cls(np.zeros((c_out, c_in, k, k), dtype=dtype), np.zeros(c_out, dtype=dtype))

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def zero_grad(self) -> None:
        self.grad_weight[...] = 0
        self.grad_bias[...] = 0

    def astype(self, dtype) -> "ConvParams":
        return ConvParams(self.weight.astype(dtype), self.bias.astype(dtype))


@numba.njit(cache=True, boundscheck=False)
def _gather_taps(xp, k, dilation, out_h, out_w):  # pragma: no cover - jitted
    n, _, _, c = xp.shape
    cols = np.empty((n, out_h, out_w, k * k, c), xp.dtype)
    for b in range(n):
        for y in range(out_h):
            for i in range(k):
                sy = y + i * dilation
                for x in range(out_w):
                    for j in range(k):
                        sx = x + j * dilation
                        t = i * k + j
                        for ch in range(c):
                            cols[b, y, x, t, ch] = xp[b, sy, sx, ch]
    return cols


@numba.njit(cache=True, boundscheck=False)
def _scatter_taps(dcols, k, dilation, hp, wp):  # pragma: no cover - jitted
    n, out_h, out_w, _, c = dcols.shape
    gp = np.zeros((n, hp, wp, c), dcols.dtype)
    for b in range(n):
        for y in range(out_h):
            for i in range(k):
                sy = y + i * dilation
                for x in range(out_w):
                    for j in range(k):
                        sx = x + j * dilation
                        t = i * k + j
                        for ch in range(c):
                            gp[b, sy, sx, ch] += dcols[b, y, x, t, ch]
    return gp


def _im2col(x: np.ndarray, k: int, dilation: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    """Gather taps into a (N*out_h*out_w, k*k*C) matrix, channel fastest."""
    n, c, h, w = x.shape
    if k == 1 and padding == 0:
        return x.transpose(0, 2, 3, 1).reshape(-1, c)
    xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w] = x.transpose(0, 2, 3, 1)
    return _gather_taps(xp, k, dilation, out_h, out_w).reshape(n * out_h * out_w, k * k * c)


def _col2im(dcols: np.ndarray, shape: tuple, k: int, dilation: int, padding: int, out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add tap gradients back to an NCHW array."""
    n, c, h, w = shape
    if k == 1 and padding == 0:
        return dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    dcols = np.ascontiguousarray(dcols).reshape(n, out_h, out_w, k * k, c)
    gp = _scatter_taps(dcols, k, dilation, h + 2 * padding, w + 2 * padding)
    return gp[:, padding:padding + h, padding:padding + w].transpose(0, 3, 1, 2)


def _weight_matrix(params: ConvParams, dtype) -> np.ndarray:
    # (C_out, C_in, k, k) -> (k*k*C_in, C_out), matching the _im2col column order
    return params.weight.transpose(2, 3, 1, 0).reshape(-1, params.c_out).astype(dtype, copy=False)


def _out_size(size: int, k: int, dilation: int, padding: int) -> int:
    return size + 2 * padding - dilation * (k - 1)


def conv2d_dilated(
    x: np.ndarray,
    params: ConvParams,
    dilation: int = 1,
    padding: int = 0,
    keep_cols: list | None = None,
) -> np.ndarray:
    """Stride-1 dilated cross-correlation with zero padding.

    For a 3x3 kernel, ``padding=dilation`` keeps H and W unchanged. When
    ``keep_cols`` is a list the gathered tap matrix is appended to it so the
    backward pass can reuse it.
    """
    check_tensor(x, "input")
    if x.shape[1] != params.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {params.c_in}")
    if dilation < 1 or padding < 0:
        raise ValueError("dilation must be >= 1 and padding >= 0")
    n, _, h, w = x.shape
    k = params.kernel_size
    out_h, out_w = _out_size(h, k, dilation, padding), _out_size(w, k, dilation, padding)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output would be {out_h}x{out_w} for input {h}x{w}")

    cols = _im2col(x, k, dilation, padding, out_h, out_w)
    if keep_cols is not None:
        keep_cols.append(cols)
    out = cols @ _weight_matrix(params, x.dtype)
    out += params.bias.astype(x.dtype, copy=False)
    return np.ascontiguousarray(out.reshape(n, out_h, out_w, params.c_out).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: np.ndarray,
    params: ConvParams,
    dilation: int,
    padding: int,
    grad_output: np.ndarray,
    cols: np.ndarray | None = None,
) -> np.ndarray:
    """Return dL/dx and accumulate dL/dW, dL/db into ``params``.

    ``cols`` is the tap matrix kept by the matching forward call, if any.
    """
    check_tensor(x, "input")
    n, c, h, w = x.shape
    k = params.kernel_size
    expected = (n, params.c_out, _out_size(h, k, dilation, padding), _out_size(w, k, dilation, padding))
    if grad_output.shape != expected:
        raise ShapeError(f"grad_output shape {grad_output.shape} != forward output {expected}")
    out_h, out_w = expected[2], expected[3]

    g = grad_output.transpose(0, 2, 3, 1).reshape(-1, params.c_out)
    if cols is None:
        cols = _im2col(x, k, dilation, padding, out_h, out_w)
    gw = (cols.T @ g).reshape(k, k, c, params.c_out).transpose(3, 2, 0, 1)
    params.grad_weight += gw.astype(params.grad_weight.dtype, copy=False)
    params.grad_bias += g.sum(axis=0).astype(params.grad_bias.dtype, copy=False)

    dcols = g @ _weight_matrix(params, x.dtype).T
    return np.ascontiguousarray(_col2im(dcols, x.shape, k, dilation, padding, out_h, out_w))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_output, 0).astype(grad_output.dtype, copy=False)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concat {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def concat_backward(grad_output: np.ndarray, channels_a: int) -> tuple[np.ndarray, np.ndarray]:
    return grad_output[:, :channels_a], grad_output[:, channels_a:]


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def add_backward(grad_output: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad_output, grad_output


class NonFiniteError(FloatingPointError):
    pass


def grad_check(
    loss_and_grad: Callable[[], tuple[float, list[np.ndarray]]],
    params: Iterable[np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad`` evaluates the loss at the current (in-place mutated)
    values of ``params`` and returns ``(loss, grads)`` with one analytic
    gradient array per parameter array. Parameters should be float64.
    """
    params = list(params)
    loss, grads = loss_and_grad()
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is not finite: {loss}")
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            lp = loss_and_grad()[0]
            flat[idx] = orig - epsilon
            lm = loss_and_grad()[0]
            flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError("loss became non-finite under perturbation")
            numeric = (lp - lm) / (2 * epsilon)
            analytic = gflat[idx]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
