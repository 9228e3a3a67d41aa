"""Dataset -> model-space tensors for the training loops.

Latents are precomputed once per run; the corpus is small enough to hold
everything in memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..model.codec import encode_latent, normalize_latent
from ..model.net import CondBundle
from ..world.clips import LABEL_IDS
from ..world.dataset import Sample
from ..world.render import latent_face_mask


@dataclass
class TensorSample:
    """One clip window, fully in normalized latent space."""

    frames: torch.Tensor        # [n + f, 4, 16, 16] clean latents, motion first
    windows: torch.Tensor       # [n + f, window] causal audio features
    ref_frame: torch.Tensor     # [4, 16, 16] reference latent
    label_id: int
    n_motion: int

    @property
    def n_target(self) -> int:
        return self.frames.shape[0] - self.n_motion

    def window_view(self, start: int, f: int) -> "TensorSample":
        """Contiguous sub-window with the same motion length.

        ``start`` indexes target positions of the parent sample; the window's
        motion context is the n frames immediately before its targets.
        """
        if start < 0 or start + f > self.n_target:
            raise IndexError(f"window [{start}, {start + f}) outside {self.n_target} targets")
        lo = start
        hi = start + self.n_motion + f
        return TensorSample(
            frames=self.frames[lo:hi],
            windows=self.windows[lo:hi],
            ref_frame=self.ref_frame,
            label_id=self.label_id,
            n_motion=self.n_motion,
        )


def tensorize_sample(sample: Sample) -> TensorSample:
    frames_f32 = sample.frames_f32()
    latents = normalize_latent(encode_latent(frames_f32)).astype(np.float32)
    ref = normalize_latent(encode_latent(sample.reference_f32()[None])[0]).astype(np.float32)
    return TensorSample(
        frames=torch.from_numpy(latents),
        windows=torch.from_numpy(sample.audio_windows()),
        ref_frame=torch.from_numpy(ref),
        label_id=LABEL_IDS[sample.label],
        n_motion=sample.motion.shape[0],
    )


def tensorize_dataset(samples: list[Sample]) -> list[TensorSample]:
    return [tensorize_sample(s) for s in samples]


def latent_face_mask_tensor() -> torch.Tensor:
    return torch.from_numpy(latent_face_mask().astype(np.float32))


@dataclass
class Batch:
    """Same-length windows stacked along a batch axis."""

    targets: torch.Tensor       # [B, f, 4, 16, 16] clean target latents
    motion: torch.Tensor        # [B, n, 4, 16, 16] clean motion latents
    windows: torch.Tensor       # [B, f, window] audio at target positions
    labels: torch.Tensor        # [B] int64
    ref_latents: torch.Tensor   # [B, 4, 16, 16]

    def cond(self, net, motion_latents: torch.Tensor) -> CondBundle:
        """Build the conditioning bundle with motion noised by the caller."""
        return CondBundle(
            audio=self.windows,
            label=self.labels,
            reference_embedding=net.encode_reference(self.ref_latents),
            motion_latents=motion_latents,
        )


def collate_batch(items: list[TensorSample]) -> Batch:
    n = items[0].n_motion
    f = items[0].n_target
    for it in items:
        if it.n_motion != n or it.n_target != f:
            raise ValueError("collate_batch requires uniform window lengths")
    frames = torch.stack([it.frames for it in items])
    windows = torch.stack([it.windows for it in items])
    return Batch(
        targets=frames[:, n:],
        motion=frames[:, :n],
        windows=windows[:, n:],
        labels=torch.tensor([it.label_id for it in items], dtype=torch.long),
        ref_latents=torch.stack([it.ref_frame for it in items]),
    )
