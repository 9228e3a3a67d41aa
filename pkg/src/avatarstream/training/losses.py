"""Loss primitives for the two training phases.

All reductions are element means, so a batch loss equals the mean of the
per-sample losses and variable-length batches stay additive.
"""

from __future__ import annotations

import torch

from ..model.net import DiscOutputs


class LossShapeError(ValueError):
    pass


def _scores(d) -> torch.Tensor:
    return d.scores if isinstance(d, DiscOutputs) else torch.as_tensor(d)


def lcm_pseudo_huber(pred: torch.Tensor, target: torch.Tensor, c: float) -> torch.Tensor:
    """mean(sqrt(diff^2 + c^2) - c); smooth near 0, linear in large errors.

    Evaluated through the conjugate form diff^2 / (sqrt(diff^2 + c^2) + c),
    which is the same function without the cancellation, so zero error gives
    exactly zero.
    """
    if pred.shape != target.shape:
        raise LossShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if c <= 0:
        raise ValueError(f"pseudo-Huber constant must be positive, got {c}")
    sq = (pred - target) ** 2
    return (sq / (torch.sqrt(sq + c * c) + c)).mean()


def hinge_disc_loss(d_fake, d_real, w: float = 1.0) -> torch.Tensor:
    """Head-averaged hinge for the critic: fake pushed below -1, real above +1."""
    fake, real = _scores(d_fake), _scores(d_real)
    if fake.shape[-1] != real.shape[-1]:
        raise LossShapeError(f"head count mismatch {fake.shape[-1]} vs {real.shape[-1]}")
    per_head = w * torch.relu(fake + 1.0) + w * torch.relu(1.0 - real)
    return per_head.mean(dim=-1).mean()


def hinge_gen_loss(d_fake, w: float = 1.0) -> torch.Tensor:
    fake = _scores(d_fake)
    return (w * torch.relu(1.0 - fake)).mean(dim=-1).mean()


def temporal_smooth(frames: torch.Tensor) -> torch.Tensor:
    """(0.15, 0.70, 0.15) along the frame axis with edge replication.

    Frame axis is 0 for [f, ...] input and 1 for [B, f, ...].
    """
    axis = 1 if frames.dim() >= 5 else 0
    f = frames.shape[axis]
    if f == 1:
        return frames
    first = frames.narrow(axis, 0, 1)
    last = frames.narrow(axis, f - 1, 1)
    padded = torch.cat([first, frames, last], dim=axis)
    return (
        0.15 * padded.narrow(axis, 0, f)
        + 0.70 * padded.narrow(axis, 1, f)
        + 0.15 * padded.narrow(axis, 2, f)
    )


def adjacent_frame_loss(pred: torch.Tensor, target: torch.Tensor, c: float) -> torch.Tensor:
    """Symmetric cross-frame coupling: pred_i vs target_{i+1} and back."""
    axis = 1 if pred.dim() >= 5 else 0
    if pred.shape != target.shape:
        raise LossShapeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    f = pred.shape[axis]
    if f < 2:
        raise LossShapeError(f"adjacent-frame loss needs at least 2 frames, got {f}")
    head = lambda x: x.narrow(axis, 0, f - 1)
    tail = lambda x: x.narrow(axis, 1, f - 1)
    return lcm_pseudo_huber(head(pred), tail(target), c) + lcm_pseudo_huber(
        tail(pred), head(target), c
    )


def face_weighted_v_loss(
    v_pred: torch.Tensor, v_tgt: torch.Tensor, face_mask: torch.Tensor, face_weight: float
) -> torch.Tensor:
    """MSE with the mouth region upweighted: mean((1 + w*mask) * diff^2)."""
    if v_pred.shape != v_tgt.shape:
        raise LossShapeError(f"shape mismatch {tuple(v_pred.shape)} vs {tuple(v_tgt.shape)}")
    weight = 1.0 + face_weight * face_mask
    return (weight * (v_pred - v_tgt) ** 2).mean()
