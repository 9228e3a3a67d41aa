"""Procedural avatar rendering and its inverse measurement oracle.

A frame is a 32x32 grayscale grid in [0, 1]. Faces are drawn from three
controls: mouth aperture m in [0, 1], vertical nod offset in [-1, 1]
(applied as a cyclic row shift so a nodded render is exactly the neutral
render rolled by round(v_nod * H/8) rows), and expression s in [-1, 1]
(vertical displacement of two mouth-corner marks).

Landmark marks (eyes, mouth corners, open aperture) render at 1.0 against
backgrounds capped at 0.72, which is what makes the extractor's soft
peak-weighting exact on clean renders and robust on model output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

H = W = 32

FACE_ROWS = (5, 27)        # inclusive
FACE_COLS = (6, 26)
EYE_ROWS = (8, 10)         # center row 9
EYE_COLS_LEFT = (11, 13)
EYE_COLS_RIGHT = (19, 21)
MOUTH_ROWS = (19, 26)      # cavity, 8 rows = H/4 full aperture
MOUTH_COLS = (10, 21)      # 12 columns wide
CORNER_BASE_ROWS = (22, 23)  # center 22.5, displaced by -round(s*4)
CORNER_COLS_LEFT = (7, 8)
CORNER_COLS_RIGHT = (23, 24)
RING_COLS = list(range(0, 5)) + list(range(28, 32))

NOD_PIXELS = H // 8        # full-scale nod is 4 rows
APERTURE_PIXELS = H // 4   # full-scale mouth opening is 8 rows
CORNER_PIXELS = 4          # full-scale corner displacement
MOUTH_AREA = (MOUTH_ROWS[1] - MOUTH_ROWS[0] + 1) * (MOUTH_COLS[1] - MOUTH_COLS[0] + 1)


class MeasurementError(ValueError):
    """Frame carries no measurable face signal."""


@dataclass(frozen=True)
class FaceParams:
    """Pose controls: mouth aperture, nod offset, mouth-corner expression."""

    mouth: float = 0.0       # m in [0, 1]
    nod: float = 0.0         # v_nod in [-1, 1]
    expression: float = 0.0  # s in [-1, 1]

    def __post_init__(self):
        if not 0.0 <= self.mouth <= 1.0:
            raise ValueError(f"mouth {self.mouth} outside [0, 1]")
        if not -1.0 <= self.nod <= 1.0:
            raise ValueError(f"nod {self.nod} outside [-1, 1]")
        if not -1.0 <= self.expression <= 1.0:
            raise ValueError(f"expression {self.expression} outside [-1, 1]")


class AvatarIdentity:
    """Deterministic per-seed appearance: background texture, skin tone,
    and a small horizontal eye offset."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence([0xA7A7, self.seed]))
        # integer spatial frequencies keep the texture 32-periodic, which
        # makes the nod roll exact
        fx, fy = rng.integers(1, 4), rng.integers(1, 4)
        gx, gy = rng.integers(1, 5), rng.integers(1, 5)
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        yy, xx = np.mgrid[0:H, 0:W]
        tex = (
            0.38
            + 0.22 * np.sin(2 * np.pi * (fx * xx + fy * yy) / 32 + p1)
            + 0.14 * np.sin(2 * np.pi * (gx * xx + gy * yy) / 32 + p2)
        )
        self.texture = np.clip(tex, 0.05, 0.70).astype(np.float32)
        self.skin = float(0.45 + 0.27 * rng.random())
        self.eye_dx = int(rng.integers(-1, 2))

    def eye_cols(self) -> np.ndarray:
        l0, l1 = EYE_COLS_LEFT
        r0, r1 = EYE_COLS_RIGHT
        cols = list(range(l0 + self.eye_dx, l1 + 1 + self.eye_dx))
        cols += list(range(r0 + self.eye_dx, r1 + 1 + self.eye_dx))
        return np.asarray(cols)


def nod_rows(v_nod: float) -> int:
    return int(round(v_nod * NOD_PIXELS))


def render_frame(identity: AvatarIdentity, p: FaceParams) -> np.ndarray:
    """Deterministic render of (identity, pose) as a float32 [H, W] frame."""
    img = identity.texture.copy()
    img[FACE_ROWS[0] : FACE_ROWS[1] + 1, FACE_COLS[0] : FACE_COLS[1] + 1] = identity.skin

    for cols in (EYE_COLS_LEFT, EYE_COLS_RIGHT):
        img[
            EYE_ROWS[0] : EYE_ROWS[1] + 1,
            cols[0] + identity.eye_dx : cols[1] + 1 + identity.eye_dx,
        ] = 1.0

    img[MOUTH_ROWS[0] : MOUTH_ROWS[1] + 1, MOUTH_COLS[0] : MOUTH_COLS[1] + 1] = 0.0
    aperture = int(round(p.mouth * APERTURE_PIXELS))
    if aperture > 0:
        img[MOUTH_ROWS[0] : MOUTH_ROWS[0] + aperture, MOUTH_COLS[0] : MOUTH_COLS[1] + 1] = 1.0

    corner_shift = -int(round(p.expression * CORNER_PIXELS))
    r0 = CORNER_BASE_ROWS[0] + corner_shift
    for cols in (CORNER_COLS_LEFT, CORNER_COLS_RIGHT):
        img[r0 : r0 + 2, cols[0] : cols[1] + 1] = 1.0

    return np.roll(img, nod_rows(p.nod), axis=0).astype(np.float32)


def _peak_centroid(strip: np.ndarray, rows: np.ndarray) -> float | None:
    """Intensity-weighted mean row of the bright peak in a column strip.

    Exact on clean renders (marks are uniform 1.0 above the threshold) and
    tolerant of soft model output. None when the strip has no peak.
    """
    per_row = strip.max(axis=1)
    peak, mean = float(per_row.max()), float(per_row.mean())
    if peak - mean < 0.05:
        return None
    thr = mean + 0.6 * (peak - mean)
    w = np.clip(strip - thr, 0.0, None).sum(axis=1)
    total = w.sum()
    if total <= 0:
        return None
    return float((w * rows).sum() / total)


def extract_face_params(frame: np.ndarray, identity: AvatarIdentity) -> FaceParams:
    """Inverse measurement: recover FaceParams from a frame of this identity.

    Quantization-limited: |dm| <= 1/8, |dnod| <= 1/4, |ds| <= 1/4 on clean
    renders. Raises MeasurementError on frames with no usable signal.
    """
    if frame.shape != (H, W):
        raise MeasurementError(f"expected {(H, W)} frame, got {frame.shape}")
    if float(frame.std()) < 1e-6:
        raise MeasurementError("all-constant frame has no face signal")

    # nod search covers the full +-4 roll of the eye marks (rows 4..14) but
    # must stop above row 15, the highest the open mouth can reach
    eye_rows = np.arange(EYE_ROWS[0] - NOD_PIXELS - 1, EYE_ROWS[1] + NOD_PIXELS + 1)
    eye_strip = frame[np.ix_(eye_rows, identity.eye_cols())]
    eye_center = _peak_centroid(eye_strip, eye_rows)
    if eye_center is None:
        raise MeasurementError("eye marks not found")
    d_cont = eye_center - (EYE_ROWS[0] + EYE_ROWS[1]) / 2.0
    nod = float(np.clip(d_cont / NOD_PIXELS, -1.0, 1.0))
    d = int(np.clip(round(d_cont), -NOD_PIXELS, NOD_PIXELS))

    zone = frame[MOUTH_ROWS[0] + d : MOUTH_ROWS[1] + 1 + d, MOUTH_COLS[0] : MOUTH_COLS[1] + 1]
    mouth = float(np.clip(zone.sum() / MOUTH_AREA, 0.0, 1.0))

    corner_rows = np.arange(
        CORNER_BASE_ROWS[0] - CORNER_PIXELS + d, CORNER_BASE_ROWS[1] + CORNER_PIXELS + 1 + d
    )
    corner_cols = np.asarray(
        list(range(CORNER_COLS_LEFT[0], CORNER_COLS_LEFT[1] + 1))
        + list(range(CORNER_COLS_RIGHT[0], CORNER_COLS_RIGHT[1] + 1))
    )
    corner_strip = frame[np.ix_(corner_rows, corner_cols)]
    corner_center = _peak_centroid(corner_strip, corner_rows)
    if corner_center is None:
        expression = 0.0
    else:
        shift = corner_center - ((CORNER_BASE_ROWS[0] + CORNER_BASE_ROWS[1]) / 2.0 + d)
        expression = float(np.clip(-shift / CORNER_PIXELS, -1.0, 1.0))

    return FaceParams(mouth=mouth, nod=nod, expression=expression)


def face_region_mask() -> np.ndarray:
    """Pixel-space mouth-region weight map: the mouth cavity plus the
    corner-mark strips, unioned over the nod range so it is pose-free."""
    mask = np.zeros((H, W), dtype=np.float32)
    mask[
        MOUTH_ROWS[0] - NOD_PIXELS : MOUTH_ROWS[1] + 1 + NOD_PIXELS,
        MOUTH_COLS[0] : MOUTH_COLS[1] + 1,
    ] = 1.0
    r0 = CORNER_BASE_ROWS[0] - CORNER_PIXELS - NOD_PIXELS
    r1 = CORNER_BASE_ROWS[1] + CORNER_PIXELS + NOD_PIXELS
    for cols in (CORNER_COLS_LEFT, CORNER_COLS_RIGHT):
        mask[r0 : r1 + 1, cols[0] : cols[1] + 1] = 1.0
    return mask


def latent_face_mask() -> np.ndarray:
    """face_region_mask average-pooled 2x2 to the 16x16 latent grid."""
    m = face_region_mask()
    return m.reshape(H // 2, 2, W // 2, 2).mean(axis=(1, 3))


def identity_correlation(frame: np.ndarray, identity: AvatarIdentity, reference: np.ndarray) -> float:
    """Pearson correlation of the background ring against a reference frame,
    after compensating the extracted nod roll."""
    p = extract_face_params(frame, identity)
    unrolled = np.roll(frame, -nod_rows(p.nod), axis=0)
    ref_p = extract_face_params(reference, identity)
    ref_unrolled = np.roll(reference, -nod_rows(ref_p.nod), axis=0)
    a = unrolled[:, RING_COLS].ravel()
    b = ref_unrolled[:, RING_COLS].ravel()
    if a.std() < 1e-9 or b.std() < 1e-9:
        raise MeasurementError("constant ring region")
    return float(np.corrcoef(a, b)[0, 1])
