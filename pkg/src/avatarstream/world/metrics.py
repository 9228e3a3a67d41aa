"""Behavioral metrics measured off rendered or generated frames."""

from __future__ import annotations

import numpy as np

from .render import AvatarIdentity, extract_face_params

MIN_LIPSYNC_FRAMES = 16


class UndefinedCorrelationError(ValueError):
    """Correlation requested against a constant sequence."""


def mouth_sequence(frames: np.ndarray, identity: AvatarIdentity) -> np.ndarray:
    return np.asarray(
        [extract_face_params(f, identity).mouth for f in frames], dtype=np.float64
    )


def nod_sequence(frames: np.ndarray, identity: AvatarIdentity) -> np.ndarray:
    return np.asarray(
        [extract_face_params(f, identity).nod for f in frames], dtype=np.float64
    )


def expression_sequence(frames: np.ndarray, identity: AvatarIdentity) -> np.ndarray:
    return np.asarray(
        [extract_face_params(f, identity).expression for f in frames], dtype=np.float64
    )


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.std() < 1e-9 or b.std() < 1e-9:
        raise UndefinedCorrelationError("constant sequence has no defined correlation")
    return float(np.corrcoef(a, b)[0, 1])


def lipsync_score(
    frames: np.ndarray,
    envelope: np.ndarray,
    identity: AvatarIdentity,
    max_lag: int = 6,
) -> tuple[float, int]:
    """Best Pearson correlation between extracted mouth aperture and the
    loudness envelope over lags in [-max_lag, max_lag].

    Positive lag means the mouth trails the audio by that many frames.
    Returns (r, lag) at the maximizing lag.
    """
    if len(frames) < MIN_LIPSYNC_FRAMES:
        raise ValueError(f"need at least {MIN_LIPSYNC_FRAMES} frames, got {len(frames)}")
    env = np.asarray(envelope, dtype=np.float64)
    if env.shape[0] != len(frames):
        raise ValueError(f"envelope length {env.shape[0]} != frame count {len(frames)}")
    if max_lag < 0 or max_lag > len(frames) - 2:
        raise ValueError(f"max_lag {max_lag} out of range for {len(frames)} frames")

    mouth = mouth_sequence(frames, identity)
    best_r, best_lag = -np.inf, 0
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            m, e = mouth[lag:], env[: env.shape[0] - lag]
        else:
            m, e = mouth[: mouth.shape[0] + lag], env[-lag:]
        r = _pearson(m, e)
        if r > best_r:
            best_r, best_lag = r, lag
    return best_r, best_lag


def nod_amplitude(frames: np.ndarray, identity: AvatarIdentity) -> float:
    """Half the peak-to-peak range of the 3-tap smoothed nod trace."""
    nod = nod_sequence(frames, identity)
    if nod.shape[0] >= 3:
        kernel = np.array([0.25, 0.5, 0.25])
        nod = np.convolve(np.pad(nod, 1, mode="edge"), kernel, mode="valid")
    return float(nod.max() - nod.min()) / 2.0


def sinusoid_fit_r2(trace: np.ndarray, period: float) -> float:
    """R^2 of the least-squares fit of a fixed-period sinusoid (plus offset)."""
    t = np.asarray(trace, dtype=np.float64)
    if t.std() < 1e-9:
        raise UndefinedCorrelationError("constant trace cannot be fit")
    i = np.arange(t.shape[0])
    basis = np.stack(
        [np.sin(2 * np.pi * i / period), np.cos(2 * np.pi * i / period), np.ones_like(i)],
        axis=1,
    )
    coef, *_ = np.linalg.lstsq(basis, t, rcond=None)
    resid = t - basis @ coef
    return float(1.0 - (resid**2).sum() / ((t - t.mean()) ** 2).sum())
