"""Fixed orthonormal 2x2 Haar codec between pixel frames and latents.

encode maps a 32x32 frame to a 4x16x16 latent whose channels are the
block average-sum and the three detail orientations, each scaled by 1/2 so
the transform is orthonormal (energy preserving, exactly invertible).
Channel order: LL, LH (horizontal detail), HL (vertical), HH (diagonal).

The transform runs in float64: sums of four float32 pixels need more than
24 mantissa bits, so float32 arithmetic would break exact inversion.
Latents stay float64 through the engine; normalize_latent is the model
boundary where they standardize per channel (constants calibrated once on
a broad render set and frozen here) and may drop to float32.
"""

from __future__ import annotations

import numpy as np

LATENT_CHANNELS = 4

# per-channel statistics of Haar latents over rendered training frames
NORM_MEAN = np.array([0.9438, 0.0120, -0.0139, -0.0002], dtype=np.float32)
NORM_STD = np.array([0.4446, 0.1084, 0.1718, 0.0377], dtype=np.float32)


class CodecError(ValueError):
    pass


def encode_latent(frames: np.ndarray) -> np.ndarray:
    """[..., H, W] frames -> [..., 4, H/2, W/2] float64 latents."""
    x = np.asarray(frames, dtype=np.float64)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise CodecError(f"frame dimensions must be even, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return np.stack(
        [(a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2],
        axis=-3,
    )


def decode_latent(latents: np.ndarray) -> np.ndarray:
    """Exact inverse of encode_latent; returns float32 frames."""
    z = np.asarray(latents, dtype=np.float64)
    if z.shape[-3] != LATENT_CHANNELS:
        raise CodecError(f"expected {LATENT_CHANNELS} channels, got {z.shape[-3]}")
    ll, lh, hl, hh = (z[..., i, :, :] for i in range(4))
    a = (ll + lh + hl + hh) / 2
    b = (ll - lh + hl - hh) / 2
    c = (ll + lh - hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    hh2, ww2 = z.shape[-2:]
    out = np.empty(z.shape[:-3] + (hh2 * 2, ww2 * 2), dtype=np.float64)
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out.astype(np.float32)


def normalize_latent(z):
    """Raw Haar latent -> model space (per-channel standardization).

    Works on numpy arrays and torch tensors; the [..., C, h, w] channel
    axis is -3 either way. Numpy output is float32 (the model dtype).
    """
    shape = (LATENT_CHANNELS, 1, 1)
    if hasattr(z, "new_tensor"):  # torch tensor
        mean = z.new_tensor(NORM_MEAN).reshape(shape)
        std = z.new_tensor(NORM_STD).reshape(shape)
        return (z - mean) / std
    return ((z - NORM_MEAN.reshape(shape)) / NORM_STD.reshape(shape)).astype(np.float32)


def denormalize_latent(z):
    shape = (LATENT_CHANNELS, 1, 1)
    if hasattr(z, "new_tensor"):
        mean = z.new_tensor(NORM_MEAN).reshape(shape)
        std = z.new_tensor(NORM_STD).reshape(shape)
        return z * std + mean
    return np.asarray(z, dtype=np.float64) * NORM_STD.reshape(shape).astype(
        np.float64
    ) + NORM_MEAN.reshape(shape).astype(np.float64)
