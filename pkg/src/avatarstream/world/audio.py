"""Frame-rate audio envelopes and causal feature windows.

Audio is a scalar loudness envelope in [0, 1] sampled once per video frame.
Feature windows are strictly causal: the window for frame i sees envelope
values i-k+1 .. i with zero padding before the clip start, so a change at
frame i can never alter a window earlier than i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WINDOW = 8

_KINDS = ("silence", "speechlike", "pulse")


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class AudioTrack:
    kind: str
    envelope: np.ndarray  # float32 [frames] in [0, 1]
    seed: int

    def __len__(self) -> int:
        return int(self.envelope.shape[0])


def synth_audio(kind: str, frames: int, seed: int = 0, period: int = 2) -> AudioTrack:
    """Deterministic envelope synthesis.

    silence: zeros. pulse: square wave of the given period starting high.
    speechlike: smoothed positive bursts, AR(1)-filtered noise gated by a
    slower on/off process; lag-1 autocorrelation lands near 0.7.
    """
    if kind not in _KINDS:
        raise AudioError(f"unknown audio kind {kind!r}, expected one of {_KINDS}")
    if frames <= 0:
        raise AudioError(f"frames must be positive, got {frames}")

    if kind == "silence":
        env = np.zeros(frames)
    elif kind == "pulse":
        if period < 2:
            raise AudioError(f"pulse period must be >= 2, got {period}")
        env = ((np.arange(frames) % period) < period // 2).astype(np.float64)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([0x5EED, seed]))
        u = rng.random(frames + 64)
        g = rng.random(frames + 64)
        fast = np.empty_like(u)
        slow = np.empty_like(g)
        fast[0], slow[0] = u[0], g[0]
        for i in range(1, len(u)):
            fast[i] = 0.70 * fast[i - 1] + 0.30 * u[i]
            slow[i] = 0.94 * slow[i - 1] + 0.06 * g[i]
        gate = np.clip((slow - 0.42) / 0.16, 0.0, 1.0)
        env = np.clip(1.7 * fast * gate, 0.0, 1.0)[64:]  # drop filter warmup

    return AudioTrack(kind=kind, envelope=env.astype(np.float32), seed=seed)


def audio_feature_windows(envelope: np.ndarray, k: int = WINDOW) -> np.ndarray:
    """Causal sliding windows: row i is envelope[i-k+1 .. i], zero padded.

    Returns float32 [frames, k] with the newest sample in the last column.
    """
    if k <= 0:
        raise AudioError(f"window size must be positive, got {k}")
    env = np.asarray(envelope, dtype=np.float32)
    if env.ndim != 1:
        raise AudioError(f"envelope must be 1-D, got shape {env.shape}")
    padded = np.concatenate([np.zeros(k - 1, dtype=np.float32), env])
    return np.stack([padded[i : i + k] for i in range(env.shape[0])])
