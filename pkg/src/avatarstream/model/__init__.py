from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_into,
    module_params,
    save_checkpoint,
)
from .codec import (
    LATENT_CHANNELS,
    NORM_MEAN,
    NORM_STD,
    CodecError,
    decode_latent,
    denormalize_latent,
    encode_latent,
    normalize_latent,
)
from .net import (
    CondBundle,
    DenoisingNet,
    Discriminator,
    DiscOutputs,
    ModelShapeError,
    NetConfig,
    ReferenceEncoder,
    denoise_predict,
    discriminate,
    sinusoidal_embedding,
)
from .sampling import (
    SIGMA_DATA,
    TIMESTEP_SCALING,
    cm_apply,
    cm_predict,
    cm_sample,
    cm_scalings,
    ddim_sample,
)

__all__ = [name for name in dir() if not name.startswith("_")]
