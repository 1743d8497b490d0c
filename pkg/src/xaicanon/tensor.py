"""Dense float32 tensors and the exact kernels the rest of the package builds on.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in channel-major
layout (C x H x W for images).  Every kernel accumulates in float64 and rounds
the result to float32 once, so kernels are deterministic and the fused/unfused
variants of a network agree to float32 precision.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateChannelError, DimensionError, ParameterError

DTYPE = np.float32
ACC = np.float64

#: |w_BN| at or below this value makes a BatchNorm channel degenerate.
DEGENERACY_TOL = 1e-12


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Return ``data`` as a C-contiguous float32 array, optionally reshaped."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if any(s < 1 for s in arr.shape):
        raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def frozen(arr: np.ndarray) -> np.ndarray:
    """Mark an array read-only and return it."""
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PadSpec:
    """Constant padding of a C x H x W input.

    ``value`` is either one scalar or one value per input channel; the latter
    appears after a BatchNorm with non-zero padding is folded into a conv.
    """

    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0
    value: Union[float, np.ndarray] = 0.0

    def __post_init__(self):
        if min(self.top, self.bottom, self.left, self.right) < 0:
            raise ParameterError(f"pad counts must be >= 0, got {self.counts}")

    @classmethod
    def uniform(cls, width: int, value: float = 0.0) -> "PadSpec":
        return cls(width, width, width, width, value)

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return (self.top, self.bottom, self.left, self.right)

    @property
    def is_zero_width(self) -> bool:
        return not any(self.counts)

    @property
    def has_nonzero_value(self) -> bool:
        return bool(np.any(np.asarray(self.value) != 0))


@dataclass(frozen=True)
class BatchNormParams:
    """Inference-time BatchNorm: ``weight * (x - mean) / sqrt(var + eps) + bias``."""

    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        n = {np.shape(a) for a in (self.weight, self.bias, self.mean, self.var)}
        if len(n) != 1 or len(next(iter(n))) != 1:
            raise ParameterError(f"BatchNorm vectors must be 1-D of equal length, got shapes {sorted(n)}")
        denom = np.asarray(self.var, ACC) + ACC(self.eps)
        bad = np.flatnonzero(~(denom > 0))
        if bad.size:
            raise ParameterError(f"BatchNorm var + eps must be > 0 (channel {int(bad[0])})")

    @property
    def channels(self) -> int:
        return int(np.shape(self.weight)[0])

    def scale(self) -> np.ndarray:
        """Per-channel multiplier ``w_BN / sqrt(var + eps)`` in float64."""
        return np.asarray(self.weight, ACC) / np.sqrt(np.asarray(self.var, ACC) + ACC(self.eps))

    def shift(self) -> np.ndarray:
        """Per-channel offset ``b_BN - w_BN * mean / sqrt(var + eps)`` in float64."""
        return np.asarray(self.bias, ACC) - self.scale() * np.asarray(self.mean, ACC)

    def degenerate_channels(self, tol: float = DEGENERACY_TOL) -> np.ndarray:
        return np.flatnonzero(np.abs(np.asarray(self.weight, ACC)) <= tol)

    def check_nondegenerate(self, tol: float = DEGENERACY_TOL, node_id: str | None = None) -> None:
        bad = self.degenerate_channels(tol)
        if bad.size:
            c = int(bad[0])
            raise DegenerateChannelError(c, float(self.weight[c]), node_id)

    def threshold(self, tol: float = DEGENERACY_TOL) -> np.ndarray:
        """Zero crossing ``z = mean - b_BN * sqrt(var + eps) / w_BN`` per channel (float64)."""
        self.check_nondegenerate(tol)
        std = np.sqrt(np.asarray(self.var, ACC) + ACC(self.eps))
        return np.asarray(self.mean, ACC) - np.asarray(self.bias, ACC) * std / np.asarray(self.weight, ACC)


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``weight @ x + bias`` for a 1-D input."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"linear: weight {weight.shape} does not conform to input {x.shape}")
    out = weight.astype(ACC) @ x.astype(ACC)
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.astype(ACC)
    return out.astype(DTYPE)


def pad_input(x: np.ndarray, pad: PadSpec, dtype=ACC) -> np.ndarray:
    """Constant-pad the spatial axes of a C x H x W array."""
    c, h, w = x.shape
    if pad.is_zero_width:
        return x.astype(dtype)
    out = np.empty((c, h + pad.top + pad.bottom, w + pad.left + pad.right), dtype=dtype)
    value = np.asarray(pad.value, dtype=dtype)
    if value.ndim == 0:
        out.fill(value)
    else:
        if value.shape != (c,):
            raise DimensionError(f"per-channel pad value {value.shape} does not match {c} channels")
        out[:] = value[:, None, None]
    out[:, pad.top:pad.top + h, pad.left:pad.left + w] = x
    return out


def conv2d_output_shape(in_shape, kernel_shape, stride=(1, 1), pad: PadSpec = PadSpec()) -> tuple[int, int, int]:
    c_in, h, w = in_shape
    c_out, k_in, kh, kw = kernel_shape
    if k_in != c_in:
        raise DimensionError(f"conv2d: kernel {tuple(kernel_shape)} expects {k_in} input channels, got input {tuple(in_shape)}")
    hp = h + pad.top + pad.bottom
    wp = w + pad.left + pad.right
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {tuple(kernel_shape)} larger than padded input {(c_in, hp, wp)}")
    sh, sw = stride
    if sh < 1 or sw < 1:
        raise ParameterError(f"conv2d: stride must be positive, got {stride}")
    return (c_out, (hp - kh) // sh + 1, (wp - kw) // sw + 1)


def conv2d_forward(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
    stride: tuple[int, int] = (1, 1),
    pad: PadSpec = PadSpec(),
) -> np.ndarray:
    """Cross-correlation of a C_in x H x W input with a C_out x C_in x kh x kw kernel.

    ``bias`` is a per-output-channel vector or a full C_out x H' x W' bias map.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected C x H x W input and 4-D kernel, got {x.shape} and {kernel.shape}")
    out_shape = conv2d_output_shape(x.shape, kernel.shape, stride, pad)
    out = _correlate(pad_input(x, pad), kernel.astype(ACC), stride)
    if bias is not None:
        out = out + _bias_term(np.asarray(bias), out_shape)
    return out.astype(DTYPE)


def _correlate(xp: np.ndarray, k: np.ndarray, stride) -> np.ndarray:
    kh, kw = k.shape[2:]
    sh, sw = stride
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    return np.einsum("chwij,ocij->ohw", cols, k, optimize=False)


def _bias_term(bias: np.ndarray, out_shape) -> np.ndarray:
    if bias.ndim == 1:
        if bias.shape[0] != out_shape[0]:
            raise DimensionError(f"conv2d: bias {bias.shape} does not match {out_shape[0]} output channels")
        return bias.astype(ACC)[:, None, None]
    if bias.shape != tuple(out_shape):
        raise DimensionError(f"conv2d: bias map {bias.shape} does not match output {tuple(out_shape)}")
    return bias.astype(ACC)


def conv2d_input_grad(
    grad_out: np.ndarray,
    kernel: np.ndarray,
    in_shape: tuple[int, int, int],
    stride: tuple[int, int] = (1, 1),
    pad: PadSpec = PadSpec(),
) -> np.ndarray:
    """Transpose of :func:`conv2d_forward` w.r.t. its input (float64 result).

    Padded border positions are dropped, since they do not depend on the input.
    """
    c_in, h, w = in_shape
    kh, kw = kernel.shape[2:]
    sh, sw = stride
    ho, wo = grad_out.shape[1:]
    g = np.asarray(grad_out, ACC)
    k = np.asarray(kernel, ACC)
    buf = np.zeros((c_in, h + pad.top + pad.bottom, w + pad.left + pad.right), dtype=ACC)
    for i in range(kh):
        for j in range(kw):
            buf[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += np.einsum(
                "ohw,oc->chw", g, k[:, :, i, j], optimize=False
            )
    return buf[:, pad.top:pad.top + h, pad.left:pad.left + w]


def batchnorm_forward(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    """Per-channel ``w * (x - mean) / sqrt(var + eps) + b`` on a C or C x H x W input.

    Inputs equal to the float32 zero crossing of a channel map to exactly 0.  This
    pins ``BN(ThreshReLU(x)) == ReLU(BN(x))`` bitwise; elsewhere the result is the
    plain formula.
    """
    x = np.asarray(x)
    if x.ndim not in (1, 3) or x.shape[0] != params.channels:
        raise DimensionError(f"batchnorm: {params.channels} channels do not match input {x.shape}")
    v = lambda a: _channel_view(np.asarray(a, ACC), x.ndim)  # noqa: E731
    std = np.sqrt(v(params.var) + ACC(params.eps))
    out = v(params.weight) * (x.astype(ACC) - v(params.mean)) / std + v(params.bias)
    live = np.abs(np.asarray(params.weight, ACC)) > DEGENERACY_TOL
    if live.any():
        z = np.zeros(params.channels, dtype=ACC)
        w = np.asarray(params.weight, ACC)
        z[live] = np.asarray(params.mean, ACC)[live] - np.asarray(params.bias, ACC)[live] * std.reshape(-1)[live] / w[live]
        z32 = z.astype(DTYPE)
        hit = (x == _channel_view(z32, x.ndim)) & _channel_view(live, x.ndim)
        out[hit] = 0.0
    return out.astype(DTYPE)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, DTYPE), DTYPE(0))


def thresh_relu_apply(x: np.ndarray, z: np.ndarray, sign: np.ndarray) -> np.ndarray:
    """Shifted ReLU: keep ``x`` where ``sign * (x - z) > 0``, otherwise output ``z``.

    ``z`` and ``sign`` are per-channel vectors (sign is +1 or -1).
    """
    x = np.asarray(x, DTYPE)
    zc = _channel_view(np.asarray(z, DTYPE), x.ndim)
    sc = _channel_view(np.asarray(sign, DTYPE), x.ndim)
    keep = ((sc > 0) & (x > zc)) | ((sc < 0) & (x < zc))
    return np.where(keep, x, np.broadcast_to(zc, x.shape)).astype(DTYPE)


def thresh_relu_forward(x: np.ndarray, params: BatchNormParams, tol: float = DEGENERACY_TOL) -> np.ndarray:
    """ReLU_thresh for the BatchNorm ``params``: ``x`` where ``BN(x) > 0``, else ``z``.

    Raises :class:`DegenerateChannelError` if any ``|w_BN| <= tol``.
    """
    x = np.asarray(x, DTYPE)
    params.check_nondegenerate(tol)
    z32 = params.threshold(tol).astype(DTYPE)
    keep = batchnorm_forward(x, params) > 0
    return np.where(keep, x, np.broadcast_to(_channel_view(z32, x.ndim), x.shape)).astype(DTYPE)


def avgpool_forward(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    cols = _pool_windows(x, kernel, stride)
    return cols.astype(ACC).mean(axis=(-2, -1)).astype(DTYPE)


def maxpool_forward(x: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    cols = _pool_windows(x, kernel, stride)
    return cols.max(axis=(-2, -1)).astype(DTYPE)


def _pool_windows(x: np.ndarray, kernel, stride) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"pooling expects a C x H x W input, got {x.shape}")
    kh, kw = kernel
    if kh > x.shape[1] or kw > x.shape[2]:
        raise DimensionError(f"pool window {tuple(kernel)} larger than input {x.shape}")
    sh, sw = stride
    return sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]


def pool_output_shape(in_shape, kernel, stride) -> tuple[int, int, int]:
    c, h, w = in_shape
    kh, kw = kernel
    if kh > h or kw > w:
        raise DimensionError(f"pool window {tuple(kernel)} larger than input {tuple(in_shape)}")
    return (c, (h - kh) // stride[0] + 1, (w - kw) // stride[1] + 1)


def global_avgpool_forward(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"global average pooling expects C x H x W, got {x.shape}")
    return x.astype(ACC).mean(axis=(1, 2)).astype(DTYPE)
