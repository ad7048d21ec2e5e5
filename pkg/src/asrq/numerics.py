"""Dense float reference kernels.

Tensors are plain numpy arrays. Everything here is channel-first: a single
example is ``(C, T)`` and a batch is ``(N, C, T)``. The channel axis is
always ``-2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INT8_RANGE = (-128, 127)
INT32_RANGE = (-(2**31), 2**31 - 1)

DTYPES = {
    "real32": np.float32,
    "real64": np.float64,
    "int8": np.int8,
    "int16": np.int16,
    "int32": np.int32,
    "int64": np.int64,
}


class ShapeError(ValueError):
    pass


class InputTooShortError(ShapeError):
    pass


class InvalidStatisticsError(ValueError):
    pass


def dtype_name(arr: np.ndarray) -> str:
    for name, dt in DTYPES.items():
        if arr.dtype == dt:
            return name
    raise TypeError(f"unsupported dtype {arr.dtype}")


def check_tensor(arr: np.ndarray) -> np.ndarray:
    """Validate the dtype and value-range invariants of a tensor."""
    arr = np.asarray(arr)
    name = dtype_name(arr)
    if arr.size and name in ("int8", "int32"):
        lo, hi = INT8_RANGE if name == "int8" else INT32_RANGE
        if arr.min() < lo or arr.max() > hi:
            raise ValueError(f"{name} tensor has values outside [{lo}, {hi}]")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        for f in ("in_channels", "out_channels", "kernel_size", "stride", "dilation", "groups"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"ConvSpec.{f} must be >= 1, got {getattr(self, f)}")
        if self.padding < 0:
            raise ValueError("ConvSpec.padding must be >= 0")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_size)

    def out_length(self, t: int) -> int:
        return (t + 2 * self.padding - self.dilation * (self.kernel_size - 1) - 1) // self.stride + 1


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (C, T) or (N, C, T), got shape {x.shape}")


def conv1d_core(x: np.ndarray, weight: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Batched cross-correlation without bias. Dtype follows numpy promotion,
    so int64 inputs give exact int64 accumulation."""
    n, c, t = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, conv expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != {spec.weight_shape}")
    t_out = spec.out_length(t)
    if t_out < 1:
        raise InputTooShortError(
            f"input length {t} too short for kernel {spec.kernel_size} "
            f"(dilation {spec.dilation}, padding {spec.padding})"
        )
    g = spec.groups
    xp = np.pad(x, ((0, 0), (0, 0), (spec.padding, spec.padding))) if spec.padding else x
    xg = xp.reshape(n, g, c // g, xp.shape[-1])
    wg = weight.reshape(g, spec.out_channels // g, c // g, spec.kernel_size)
    span = spec.stride * (t_out - 1) + 1
    out = None
    for k in range(spec.kernel_size):
        start = k * spec.dilation
        xs = xg[..., start : start + span : spec.stride]
        term = np.einsum("goc,ngct->ngot", wg[..., k], xs)
        out = term if out is None else out + term
    return out.reshape(n, spec.out_channels, t_out)


def conv1d_f(x, weight, bias, spec: ConvSpec) -> np.ndarray:
    x = np.asarray(x)
    xb, squeeze = _as_batch(x)
    out = conv1d_core(xb, np.asarray(weight), spec)
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
        out = out + bias[:, None]
    return out[0] if squeeze else out


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over every non-channel axis."""
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)
    mean = x.mean(axis=axes)
    var = ((x - np.expand_dims(mean, -1)) ** 2).mean(axis=axes)
    return mean, var


def bn_affine(gamma, beta, mean, var, eps):
    """Per-channel (scale, shift) equivalent to an eval-mode BatchNorm."""
    var = np.asarray(var)
    if eps <= 0:
        raise InvalidStatisticsError(f"eps must be positive, got {eps}")
    if np.any(var < 0):
        raise InvalidStatisticsError("running variance has negative entries")
    scale = np.asarray(gamma) / np.sqrt(var + eps)
    shift = np.asarray(beta) - np.asarray(mean) * scale
    return scale, shift


def batchnorm_f(x, gamma, beta, mean, var, eps=1e-5, mode="eval"):
    """BatchNorm over the channel axis using running statistics.

    ``mode="collect"`` also returns the batch ``(mean, biased variance)`` of
    the input; the output is still normalized with the running statistics.
    """
    if mode not in ("eval", "collect"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    x = np.asarray(x)
    if x.shape[-2] != np.shape(gamma)[0]:
        raise ShapeError(f"input has {x.shape[-2]} channels, batchnorm has {np.shape(gamma)[0]}")
    scale, shift = bn_affine(gamma, beta, mean, var, eps)
    y = x * scale.astype(x.dtype)[:, None] + shift.astype(x.dtype)[:, None]
    if mode == "collect":
        return y, channel_stats(x)
    return y, None


def matmul_f(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    return a @ b


def dense_f(x, weight, bias=None):
    """Per-frame linear map over the channel axis: (..., C_in, T) -> (..., C_out, T)."""
    x, weight = np.asarray(x), np.asarray(weight)
    if x.shape[-2] != weight.shape[1]:
        raise ShapeError(f"dense expects {weight.shape[1]} input channels, got {x.shape[-2]}")
    y = np.einsum("oc,...ct->...ot", weight, x)
    if bias is not None:
        y = y + np.asarray(bias)[:, None]
    return y


def relu_f(x):
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def add_f(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def sigmoid_f(x):
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish_f(x):
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    return x * sigmoid_f(x)


def softmax_f(x, axis=-1):
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)
