"""State-conditioned pose trajectories and clip rendering.

Each behavioral state maps audio to pose differently:
  speaking   mouth tracks the loudness envelope, head nearly still
  listening  mouth closed, head nods in period-16 episodes (32 on, 16 off,
             starting on) regardless of audio
  idle       closed mouth, sub-quantization pose noise, so rendered frames
             are static
Expression is held constant across a clip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioTrack
from .render import AvatarIdentity, FaceParams, render_frame

LABELS = ("speaking", "listening", "idle")
LABEL_IDS = {name: i for i, name in enumerate(LABELS)}

NOD_PERIOD = 16
NOD_EPISODE_ON = 32
NOD_EPISODE_OFF = 16
NOD_AMPLITUDE = 0.5


class ClipError(ValueError):
    pass


@dataclass(frozen=True)
class Clip:
    frames: np.ndarray  # float32 [T, H, W]
    params: tuple[FaceParams, ...]
    label: str
    expression: float
    audio: AudioTrack


def listening_gate(i: np.ndarray | int) -> np.ndarray | float:
    """1.0 inside a nod episode, 0.0 between episodes."""
    phase = np.mod(i, NOD_EPISODE_ON + NOD_EPISODE_OFF)
    return (phase < NOD_EPISODE_ON).astype(np.float64)


def pose_trajectory(
    label: str, envelope: np.ndarray, expression: float, seed: int
) -> list[FaceParams]:
    if label not in LABELS:
        raise ClipError(f"unknown state label {label!r}, expected one of {LABELS}")
    n = int(envelope.shape[0])
    rng = np.random.default_rng(np.random.SeedSequence([0xC11F, seed]))
    i = np.arange(n)

    if label == "speaking":
        mouth = np.clip(envelope.astype(np.float64), 0.0, 1.0)
        phase = rng.uniform(0, 2 * np.pi)
        nod = 0.04 * np.sin(2 * np.pi * i / 24 + phase)  # rounds to 0 rows
    elif label == "listening":
        mouth = np.zeros(n)
        nod = NOD_AMPLITUDE * np.sin(2 * np.pi * i / NOD_PERIOD) * listening_gate(i)
    else:
        mouth = np.zeros(n)
        nod = rng.uniform(-0.02, 0.02, n)  # below the 1/8 quantization step

    return [
        FaceParams(mouth=float(mouth[j]), nod=float(nod[j]), expression=float(expression))
        for j in range(n)
    ]


def make_clip(
    identity: AvatarIdentity,
    audio: AudioTrack,
    label: str,
    expression: float,
    seed: int = 0,
) -> Clip:
    """Render a full clip; one frame per envelope sample."""
    params = pose_trajectory(label, audio.envelope, expression, seed)
    frames = np.stack([render_frame(identity, p) for p in params])
    return Clip(
        frames=frames,
        params=tuple(params),
        label=label,
        expression=float(expression),
        audio=audio,
    )
