"""Conditional v-prediction denoiser and multi-head conditional discriminator.

The denoiser consumes the f noisy target latents plus a conditioning
bundle: causal per-frame audio windows (injected as gated per-channel
modulation, the convolutional stand-in for audio cross-attention), a
reference embedding vector broadcast-added at mid-depth, n clean motion
latents that join the target frames only inside the single temporal
mixing convolution, and a class label added to the timestep embedding.

All tensors live in model (normalized) latent space. Forward passes are
pure functions of (parameters, inputs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .codec import LATENT_CHANNELS


class ModelShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    channels: tuple[int, int, int] = (32, 64, 64)
    temporal_kernel: int = 5
    window: int = 8
    cond_dim: int = 128
    ref_dim: int = 128
    num_labels: int = 3
    latent_size: int = 16

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "temporal_kernel": self.temporal_kernel,
            "window": self.window,
            "cond_dim": self.cond_dim,
            "ref_dim": self.ref_dim,
            "num_labels": self.num_labels,
            "latent_size": self.latent_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return NetConfig(**d)


@dataclass
class CondBundle:
    """Conditioning inputs for one chunk (optionally batched)."""

    audio: torch.Tensor             # [f, k] or [B, f, k], strictly causal windows
    label: torch.Tensor             # [] or [B] int64
    reference_embedding: torch.Tensor  # [ref_dim] or [B, ref_dim]
    motion_latents: torch.Tensor    # [n, C, h, w] or [B, n, C, h, w]
    face_mask: torch.Tensor | None = None  # [h, w] latent-space weight map

    def is_batched(self) -> bool:
        return self.audio.dim() == 3

    def batched(self) -> "CondBundle":
        if self.is_batched():
            return self
        return CondBundle(
            audio=self.audio[None],
            label=self.label.reshape(1),
            reference_embedding=self.reference_embedding[None],
            motion_latents=self.motion_latents[None],
            face_mask=self.face_mask,
        )


def sinusoidal_embedding(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard log-spaced sin/cos embedding of scalar values -> [..., dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    ).to(values.device)
    args = values.float()[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def _film(x: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Per-channel modulation: params [..., 2C] -> x * (1 + scale) + shift."""
    scale, shift = params.chunk(2, dim=-1)
    scale = scale.reshape(*scale.shape, 1, 1)
    shift = shift.reshape(*shift.shape, 1, 1)
    return x * (1.0 + scale) + shift


class ReferenceEncoder(nn.Module):
    """Reference latent -> identity/expression embedding vector."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        c1, c2, _ = cfg.channels
        self.conv1 = nn.Conv2d(LATENT_CHANNELS, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.fc = nn.Linear(c2, cfg.ref_dim)

    def forward(self, ref_latent: torch.Tensor) -> torch.Tensor:
        h = torch.nn.functional.silu(self.conv1(ref_latent))
        h = torch.nn.functional.silu(self.conv2(h))
        return self.fc(h.mean(dim=(-2, -1)))


class DenoisingNet(nn.Module):
    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        c1, c2, c3 = cfg.channels
        d = cfg.cond_dim

        self.ref_encoder = ReferenceEncoder(cfg)
        self.label_table = nn.Embedding(cfg.num_labels, d)
        nn.init.zeros_(self.label_table.weight)
        self.flag_table = nn.Embedding(2, d)  # motion vs target position

        self.cond_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.cond_film1 = nn.Linear(d, 2 * c1)
        self.cond_film2 = nn.Linear(d, 2 * c2)
        self.cond_film3 = nn.Linear(d, 2 * c3)
        for m in (self.cond_film1, self.cond_film2, self.cond_film3):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

        # gated audio injection; these weights stay frozen during
        # consistency conversion
        self.audio_mlp = nn.Sequential(
            nn.Linear(cfg.window, 64), nn.SiLU(), nn.Linear(64, 2 * c1 + 2 * c2)
        )
        nn.init.zeros_(self.audio_mlp[2].weight)
        nn.init.zeros_(self.audio_mlp[2].bias)

        self.enc1 = nn.Conv2d(LATENT_CHANNELS, c1, 3, padding=1)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.ref_proj = nn.Linear(cfg.ref_dim, c2)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        # causal: left-padded so position j mixes only positions <= j,
        # keeping audio influence from leaking to earlier output frames
        self.temporal = nn.Conv1d(c3, c3, cfg.temporal_kernel, padding=0)
        self.up1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.out = nn.Conv2d(c1, LATENT_CHANNELS, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def encode_reference(self, ref_latent: torch.Tensor) -> torch.Tensor:
        return self.ref_encoder(ref_latent)

    def embed_timestep_and_label(self, t: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        """Sinusoidal timestep embedding plus the label table row, additive."""
        return sinusoidal_embedding(t, self.cfg.cond_dim) + self.label_table(label)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: CondBundle) -> torch.Tensor:
        if not torch.isfinite(x_t).all():
            raise ModelShapeError("non-finite values in input latents")
        squeeze = x_t.dim() == 4
        if squeeze:
            x_t = x_t[None]
            t = torch.as_tensor(t).reshape(1)
            cond = cond.batched()
        if x_t.dim() != 5 or x_t.shape[2] != LATENT_CHANNELS:
            raise ModelShapeError(f"expected [B, f, C, h, w] latents, got {tuple(x_t.shape)}")
        B, f = x_t.shape[:2]
        n = cond.motion_latents.shape[1]
        if cond.audio.shape[:2] != (B, f):
            raise ModelShapeError(
                f"audio windows {tuple(cond.audio.shape)} do not match {f} target frames"
            )
        if cond.audio.shape[2] != self.cfg.window:
            raise ModelShapeError(
                f"audio window size {cond.audio.shape[2]} != configured {self.cfg.window}"
            )
        c1, c2, c3 = self.cfg.channels
        T = n + f
        hw = self.cfg.latent_size

        z = torch.cat([cond.motion_latents, x_t], dim=1)  # [B, T, C, h, w]

        base = self.embed_timestep_and_label(t, cond.label)  # [B, d]
        pos = sinusoidal_embedding(
            torch.arange(T, device=x_t.device, dtype=torch.float32), self.cfg.cond_dim, 128.0
        )
        flags = torch.cat(
            [z.new_zeros(n, dtype=torch.long), z.new_ones(f, dtype=torch.long)]
        )
        cvec = self.cond_mlp(base[:, None] + pos[None] + self.flag_table(flags)[None])

        # audio modulation applies to target positions only
        a = self.audio_mlp(cond.audio)  # [B, f, 2c1+2c2]
        a = torch.cat([a.new_zeros(B, n, a.shape[-1]), a], dim=1)
        a1, a2 = a[..., : 2 * c1], a[..., 2 * c1 :]

        flat = z.reshape(B * T, LATENT_CHANNELS, hw, hw)
        h1 = self.enc1(flat).reshape(B, T, c1, hw, hw)
        h1 = _film(_film(h1, self.cond_film1(cvec)), a1)
        h1 = torch.nn.functional.silu(h1)

        d1 = self.down1(h1.reshape(B * T, c1, hw, hw)).reshape(B, T, c2, hw // 2, hw // 2)
        d1 = _film(_film(d1, self.cond_film2(cvec)), a2)
        d1 = d1 + self.ref_proj(cond.reference_embedding)[:, None, :, None, None]
        d1 = torch.nn.functional.silu(d1)

        d2 = self.down2(d1.reshape(B * T, c2, hw // 2, hw // 2)).reshape(
            B, T, c3, hw // 4, hw // 4
        )
        d2 = torch.nn.functional.silu(_film(d2, self.cond_film3(cvec)))

        # the single temporal mixing layer spans all n+f positions
        s = hw // 4
        seq = d2.permute(0, 3, 4, 2, 1).reshape(B * s * s, c3, T)
        seq = torch.nn.functional.pad(seq, (self.cfg.temporal_kernel - 1, 0))
        seq = torch.nn.functional.silu(self.temporal(seq))
        d2 = d2 + seq.reshape(B, s, s, c3, T).permute(0, 4, 3, 1, 2)

        # decode target positions only
        d2_t = d2[:, n:].reshape(B * f, c3, s, s)
        up = torch.nn.functional.interpolate(d2_t, scale_factor=2, mode="nearest")
        u1 = torch.nn.functional.silu(self.up1(up)) + d1[:, n:].reshape(
            B * f, c2, hw // 2, hw // 2
        )
        up = torch.nn.functional.interpolate(u1, scale_factor=2, mode="nearest")
        u2 = torch.nn.functional.silu(self.up2(up)) + h1[:, n:].reshape(B * f, c1, hw, hw)
        v = self.out(u2).reshape(B, f, LATENT_CHANNELS, hw, hw)
        return v[0] if squeeze else v


def denoise_predict(net: DenoisingNet, x_t: torch.Tensor, t, cond: CondBundle) -> torch.Tensor:
    """Functional entry point; accepts unbatched [f, C, h, w] or batched input."""
    t = torch.as_tensor(t, dtype=torch.float32)
    return net(x_t, t, cond)


@dataclass
class DiscOutputs:
    scores: torch.Tensor  # [H] or [B, H]

    @property
    def heads(self) -> int:
        return int(self.scores.shape[-1])


class Discriminator(nn.Module):
    """H-head conditional critic; each head pools backbone features under
    the face-region weight map, so a zero mask makes every head a pure
    bias, insensitive to the input."""

    def __init__(self, cfg: NetConfig | None = None, heads: int = 3):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        if heads < 1:
            raise ValueError(f"need at least one head, got {heads}")
        self.heads = heads
        c1, c2, c3 = cfg.channels
        d = cfg.cond_dim
        self.conv1 = nn.Conv2d(LATENT_CHANNELS, c1, 3, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.temporal = nn.Conv1d(c3, c3, 3, padding=1)
        self.cond_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.audio_proj = nn.Linear(cfg.window, d)
        self.ref_proj = nn.Linear(cfg.ref_dim, d)
        self.motion_proj = nn.Linear(LATENT_CHANNELS, d)
        self.film1 = nn.Linear(d, 2 * c1)
        self.film2 = nn.Linear(d, 2 * c2)
        self.film3 = nn.Linear(d, 2 * c3)
        for m in (self.film1, self.film2, self.film3):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)
        head_dims = [c1, c2, c3][:heads] + [c3] * max(0, heads - 3)
        self.head_fcs = nn.ModuleList([nn.Linear(c, 1) for c in head_dims])

    @staticmethod
    def _masked_pool(feat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """feat [B, T, C, h, w], mask [h, w] -> [B, C]; zero mask -> zeros."""
        total = mask.sum()
        if float(total) == 0.0:
            return feat.new_zeros(feat.shape[0], feat.shape[2])
        pooled = (feat * mask).sum(dim=(-2, -1)) / total
        return pooled.mean(dim=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: CondBundle) -> DiscOutputs:
        squeeze = x.dim() == 4
        if squeeze:
            x = x[None]
            t = torch.as_tensor(t).reshape(1)
            cond = cond.batched()
        B, f = x.shape[:2]
        hw = self.cfg.latent_size
        mask = cond.face_mask
        if mask is None:
            mask = x.new_ones(hw, hw)
        mask2 = mask.reshape(hw // 2, 2, hw // 2, 2).mean(dim=(1, 3))
        mask3 = mask2.reshape(hw // 4, 2, hw // 4, 2).mean(dim=(1, 3))

        base = sinusoidal_embedding(torch.as_tensor(t, dtype=torch.float32), self.cfg.cond_dim)
        cvec = base[:, None] + self.audio_proj(cond.audio)
        cvec = cvec + self.ref_proj(cond.reference_embedding)[:, None]
        cvec = cvec + self.motion_proj(cond.motion_latents.mean(dim=(1, 3, 4)))[:, None]
        cvec = self.cond_mlp(cvec)  # [B, f, d]

        c1, c2, c3 = self.cfg.channels
        h1 = self.conv1(x.reshape(B * f, -1, hw, hw)).reshape(B, f, c1, hw, hw)
        h1 = torch.nn.functional.silu(_film(h1, self.film1(cvec)))
        h2 = self.conv2(h1.reshape(B * f, c1, hw, hw)).reshape(B, f, c2, hw // 2, hw // 2)
        h2 = torch.nn.functional.silu(_film(h2, self.film2(cvec)))
        h3 = self.conv3(h2.reshape(B * f, c2, hw // 2, hw // 2)).reshape(
            B, f, c3, hw // 4, hw // 4
        )
        h3 = torch.nn.functional.silu(_film(h3, self.film3(cvec)))
        s = hw // 4
        seq = h3.permute(0, 3, 4, 2, 1).reshape(B * s * s, c3, f)
        seq = torch.nn.functional.silu(self.temporal(seq))
        h3 = h3 + seq.reshape(B, s, s, c3, f).permute(0, 4, 3, 1, 2)

        feats = [h1, h2, h3] + [h3] * max(0, self.heads - 3)
        masks = [mask, mask2, mask3] + [mask3] * max(0, self.heads - 3)
        scores = [
            fc(self._masked_pool(ft, mk)) for fc, ft, mk in zip(self.head_fcs, feats, masks)
        ]
        out = torch.cat(scores[: self.heads], dim=-1)
        return DiscOutputs(scores=out[0] if squeeze else out)


def discriminate(disc: Discriminator, x: torch.Tensor, t, cond: CondBundle) -> DiscOutputs:
    return disc(x, torch.as_tensor(t, dtype=torch.float32), cond)
