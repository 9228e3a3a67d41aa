"""Offline autoregressive rollout of a trained denoiser.

Generates a clip chunk by chunk with motion-frame conditioning, exactly the
way the streaming engine does, but without pacing or state machinery: one
identity, one label, one envelope. Used for held-out evaluation of training
runs and by the eval command.
"""

from __future__ import annotations

import numpy as np
import torch

from ..model.codec import decode_latent, denormalize_latent, encode_latent, normalize_latent
from ..model.net import CondBundle, DenoisingNet
from ..model.sampling import cm_sample, ddim_sample
from ..sched import NoiseSchedule, forward_diffuse
from ..world.audio import WINDOW, audio_feature_windows
from ..world.clips import LABEL_IDS
from ..world.dataset import quantize_frames
from ..world.metrics import lipsync_score
from ..world.render import AvatarIdentity, FaceParams, render_frame


def reference_latent(identity: AvatarIdentity, expression: float = 0.0) -> torch.Tensor:
    """Rest-pose render of the identity at the given expression, as a
    normalized latent [4, 16, 16]."""
    frame = render_frame(identity, FaceParams(mouth=0.0, nod=0.0, expression=expression))
    lat = normalize_latent(encode_latent(frame[None])[0]).astype(np.float32)
    return torch.from_numpy(lat)


def latents_to_frames(latents: torch.Tensor) -> np.ndarray:
    """Normalized latents [N, 4, 16, 16] -> uint8 frames [N, 32, 32]."""
    arr = denormalize_latent(latents.detach().numpy().astype(np.float64))
    imgs = decode_latent(arr)
    return quantize_frames(np.clip(imgs, 0.0, 1.0))


@torch.no_grad()
def rollout_clip(
    net: DenoisingNet,
    sched: NoiseSchedule,
    identity: AvatarIdentity,
    envelope: np.ndarray,
    label: str = "speaking",
    expression: float = 0.0,
    sampler: str = "ddim",
    steps: int = 25,
    n_motion: int = 4,
    chunk_f: int = 8,
    seed: int = 0,
) -> np.ndarray:
    """Generate len(envelope) frames autoregressively; returns uint8 [N, 32, 32].

    The motion buffer starts as n copies of the rest-pose latent and then
    carries the last n generated latents across chunks. Motion conditioning is
    re-noised to the sampler's current timestep with one fixed noise draw per
    chunk.
    """
    if len(envelope) % chunk_f != 0:
        raise ValueError(f"envelope length {len(envelope)} not a multiple of chunk_f={chunk_f}")
    gen = torch.Generator().manual_seed(seed)
    windows = torch.from_numpy(audio_feature_windows(np.asarray(envelope, dtype=np.float32), WINDOW))
    label_t = torch.tensor(LABEL_IDS[label], dtype=torch.long)
    ref = reference_latent(identity, expression)
    ref_embed = net.encode_reference(ref[None])[0]

    motion = ref[None].repeat(n_motion, 1, 1, 1)
    out: list[torch.Tensor] = []
    for pos in range(0, len(envelope), chunk_f):
        win = windows[pos : pos + chunk_f]
        eps_m = torch.empty_like(motion).normal_(generator=gen)

        def cond_at(t: int) -> CondBundle:
            return CondBundle(
                audio=win,
                label=label_t,
                reference_embedding=ref_embed,
                motion_latents=forward_diffuse(motion, eps_m, sched, t),
            )

        noise = torch.empty(chunk_f, *ref.shape).normal_(generator=gen)
        if sampler == "ddim":
            x0 = ddim_sample(net, sched, noise, cond_at, steps)
        elif sampler == "cm":
            x0 = cm_sample(net, sched, noise, cond_at, steps, generator=gen)
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
        motion = x0[-n_motion:]
        out.append(x0)

    return latents_to_frames(torch.cat(out))


def heldout_lipsync(
    net: DenoisingNet,
    sched: NoiseSchedule,
    identity: AvatarIdentity,
    envelope: np.ndarray,
    sampler: str = "ddim",
    steps: int = 25,
    seed: int = 0,
) -> tuple[float, int]:
    """Lip-sync correlation of a generated clip against its driving envelope."""
    frames = rollout_clip(
        net, sched, identity, envelope, label="speaking", sampler=sampler, steps=steps, seed=seed
    )
    return lipsync_score(frames.astype(np.float32) / 255.0, envelope, identity)
