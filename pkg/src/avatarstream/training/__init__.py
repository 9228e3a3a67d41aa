from .data import (
    Batch,
    TensorSample,
    collate_batch,
    latent_face_mask_tensor,
    tensorize_dataset,
    tensorize_sample,
)
from .loop import (
    ConsistencyTrainConfig,
    DdpmTrainConfig,
    FROZEN_PREFIXES,
    MetricsWriter,
    TrainHyper,
    TrainingDiverged,
    consistency_pair,
    ddpm_batch_loss,
    effective_warmup,
    ema_update,
    freeze_conditioning,
    load_denoiser,
    train_consistency,
    train_ddpm,
)
from .losses import (
    LossShapeError,
    adjacent_frame_loss,
    face_weighted_v_loss,
    hinge_disc_loss,
    hinge_gen_loss,
    lcm_pseudo_huber,
    temporal_smooth,
)
from .rollout import heldout_lipsync, latents_to_frames, reference_latent, rollout_clip

__all__ = [
    "Batch",
    "TensorSample",
    "collate_batch",
    "latent_face_mask_tensor",
    "tensorize_dataset",
    "tensorize_sample",
    "ConsistencyTrainConfig",
    "DdpmTrainConfig",
    "FROZEN_PREFIXES",
    "MetricsWriter",
    "TrainHyper",
    "TrainingDiverged",
    "consistency_pair",
    "ddpm_batch_loss",
    "effective_warmup",
    "ema_update",
    "freeze_conditioning",
    "load_denoiser",
    "train_consistency",
    "train_ddpm",
    "LossShapeError",
    "adjacent_frame_loss",
    "face_weighted_v_loss",
    "hinge_disc_loss",
    "hinge_gen_loss",
    "lcm_pseudo_huber",
    "temporal_smooth",
    "heldout_lipsync",
    "latents_to_frames",
    "reference_latent",
    "rollout_clip",
]
