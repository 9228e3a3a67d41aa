from .audio import WINDOW, AudioError, AudioTrack, audio_feature_windows, synth_audio
from .clips import (
    LABEL_IDS,
    LABELS,
    NOD_AMPLITUDE,
    NOD_EPISODE_OFF,
    NOD_EPISODE_ON,
    NOD_PERIOD,
    Clip,
    ClipError,
    listening_gate,
    make_clip,
    pose_trajectory,
)
from .dataset import (
    AUDIO_BY_LABEL,
    Dataset,
    DatasetConfig,
    DatasetError,
    Sample,
    draw_labels,
    load_dataset,
    make_dataset,
    quantize_frames,
    read_blob,
    save_dataset,
    write_blob,
)
from .metrics import (
    MIN_LIPSYNC_FRAMES,
    UndefinedCorrelationError,
    expression_sequence,
    lipsync_score,
    mouth_sequence,
    nod_amplitude,
    nod_sequence,
    sinusoid_fit_r2,
)
from .render import (
    APERTURE_PIXELS,
    CORNER_PIXELS,
    H,
    MOUTH_AREA,
    MOUTH_COLS,
    MOUTH_ROWS,
    NOD_PIXELS,
    W,
    AvatarIdentity,
    FaceParams,
    MeasurementError,
    extract_face_params,
    face_region_mask,
    identity_correlation,
    latent_face_mask,
    nod_rows,
    render_frame,
)

__all__ = [name for name in dir() if not name.startswith("_")]
