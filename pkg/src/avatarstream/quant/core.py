"""INT8 tensor quantization primitives and integer matrix kernels.

Weights use symmetric per-output-channel codes in [-127, 127] with a
zero point of 0; activations use a single affine scale per tensor with
an integer zero point in [0, 255]. Convolutions run as im2col followed
by an int32-accumulating integer matmul; the result is rescaled to
float at the layer boundary.
"""

from __future__ import annotations

import numpy as np


class QuantError(ValueError):
    pass


def symmetric_scales(w: np.ndarray, axis: int = 0) -> np.ndarray:
    """Per-output-channel scale max|w|/127; all-zero channels get scale 1."""
    w = np.asarray(w, dtype=np.float64)
    if not np.isfinite(w).all():
        raise QuantError("non-finite values in weight tensor")
    reduce_axes = tuple(i for i in range(w.ndim) if i != axis % max(w.ndim, 1))
    peak = np.abs(w).max(axis=reduce_axes) if w.ndim > 1 else np.abs(w).max()
    peak = np.atleast_1d(np.asarray(peak, dtype=np.float64))
    scales = peak / 127.0
    # all-zero channels, and subnormal peaks whose scale underflows
    return np.where(scales == 0.0, 1.0, scales)


def affine_qparams(lo: float, hi: float) -> tuple[float, int]:
    """Per-tensor affine (scale, zero_point) covering [lo, hi] and 0."""
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise QuantError("non-finite activation range")
    if lo > hi:
        raise QuantError(f"activation range inverted: [{lo}, {hi}]")
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / 255.0
    if scale == 0.0:  # empty or subnormal range
        return 1.0, 0
    zp = int(np.clip(np.rint(-lo / scale), 0, 255))
    return scale, zp


def encode(x: np.ndarray, scale, zero_point, lo_code: int, hi_code: int) -> np.ndarray:
    """code = clamp(round(x/scale) + zero_point, lo_code, hi_code)."""
    codes = np.rint(np.asarray(x, dtype=np.float64) / scale) + zero_point
    return np.clip(codes, lo_code, hi_code)


def decode(codes: np.ndarray, scale, zero_point=0) -> np.ndarray:
    return (np.asarray(codes, dtype=np.float64) - zero_point) * scale


def quantize_weights(w: np.ndarray, scales: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-output-channel codes; returns (int8 codes, scales)."""
    w = np.asarray(w, dtype=np.float64)
    if scales is None:
        scales = symmetric_scales(w)
    scales = np.asarray(scales, dtype=np.float64)
    if (scales <= 0).any():
        raise QuantError("weight scales must be positive")
    shape = (-1,) + (1,) * (w.ndim - 1)
    codes = encode(w, scales.reshape(shape), 0, -127, 127)
    return codes.astype(np.int8), scales


def quantize_activations(x: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    """Affine per-tensor codes; returns uint8."""
    if scale <= 0:
        raise QuantError("activation scale must be positive")
    if not 0 <= zero_point <= 255:
        raise QuantError(f"zero point {zero_point} outside [0, 255]")
    return encode(x, scale, zero_point, 0, 255).astype(np.uint8)


def quantize_tensor(x: np.ndarray, scheme: str) -> tuple[np.ndarray, np.ndarray | float, int]:
    """One-shot quantization: (codes, scale(s), zero_point).

    scheme "symmetric": per-output-channel along axis 0, int8, zp 0.
    scheme "affine": per-tensor from the observed min/max, uint8.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise QuantError("non-finite values in tensor")
    if scheme == "symmetric":
        codes, scales = quantize_weights(x)
        return codes, scales, 0
    if scheme == "affine":
        if x.size == 0:
            raise QuantError("empty tensor")
        scale, zp = affine_qparams(float(x.min()), float(x.max()))
        return quantize_activations(x, scale, zp), scale, zp
    raise QuantError(f"unknown scheme {scheme!r}")


def dequantize(codes: np.ndarray, scale, zero_point=0) -> np.ndarray:
    """Inverse of quantize_tensor; per-channel scales broadcast along axis 0."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim == 1 and codes.ndim > 1:
        scale = scale.reshape((-1,) + (1,) * (codes.ndim - 1))
    return decode(codes, scale, zero_point)


def integer_linear(
    a_codes: np.ndarray,
    w_codes: np.ndarray,
    w_scales: np.ndarray,
    a_scale: float,
    a_zero_point: int,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """int8 x int8 -> int32 accumulate, rescaled to float32.

    a_codes [P, K] uint8, w_codes [O, K] int8. The zero-point cross term
    zp * sum(w) is exact in integers, so the kernel equals float math on
    the dequantized operands.
    """
    a = np.asarray(a_codes, dtype=np.int32)
    w = np.asarray(w_codes, dtype=np.int32)
    if a.shape[-1] != w.shape[-1]:
        raise QuantError(f"inner dims differ: {a.shape} vs {w.shape}")
    acc = a @ w.T - int(a_zero_point) * w.sum(axis=1)[None, :]
    out = acc.astype(np.float64) * (np.asarray(w_scales, dtype=np.float64) * a_scale)[None, :]
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)[None, :]
    return out.astype(np.float32)


def _patches_2d(codes: np.ndarray, kernel: tuple[int, int], stride: tuple[int, int],
                padding: tuple[int, int], pad_value: int) -> tuple[np.ndarray, int, int]:
    """uint8 [N, C, H, W] -> [N, P, C*kh*kw] im2col; padding holds the
    zero-point code so padded taps dequantize to exactly zero."""
    n, c, h, w = codes.shape
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    padded = np.pad(codes, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                    constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]                       # [N, C, Ho, Wo, kh, kw]
    ho, wo = win.shape[2], win.shape[3]
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(patches), ho, wo


def integer_conv2d(
    a_codes: np.ndarray,
    w_codes: np.ndarray,
    w_scales: np.ndarray,
    a_scale: float,
    a_zero_point: int,
    bias: np.ndarray | None = None,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Integer conv via im2col: a_codes [N, C, H, W], w_codes [O, C, kh, kw]."""
    o, c, kh, kw = w_codes.shape
    if a_codes.shape[1] != c:
        raise QuantError(f"channel mismatch: input {a_codes.shape[1]} vs weight {c}")
    patches, ho, wo = _patches_2d(a_codes, (kh, kw), stride, padding, a_zero_point)
    flat_w = w_codes.reshape(o, c * kh * kw)
    n = a_codes.shape[0]
    out = integer_linear(patches.reshape(n * ho * wo, -1), flat_w,
                         w_scales, a_scale, a_zero_point, bias)
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def integer_conv1d(
    a_codes: np.ndarray,
    w_codes: np.ndarray,
    w_scales: np.ndarray,
    a_scale: float,
    a_zero_point: int,
    bias: np.ndarray | None = None,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Integer 1-d conv: a_codes [N, C, T], w_codes [O, C, k]."""
    a4 = a_codes[:, :, None, :]
    w4 = w_codes[:, :, None, :]
    out = integer_conv2d(a4, w4, w_scales, a_scale, a_zero_point, bias,
                         stride=(1, stride), padding=(0, padding))
    return out[:, :, 0, :]
