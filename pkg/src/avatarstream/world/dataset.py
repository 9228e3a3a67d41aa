"""Training corpus generation and on-disk persistence.

A sample is one conditioning window cut from a rendered clip: a reference
frame (identity + expression), n motion-context frames, f target frames,
and the loudness envelope covering the window plus k-1 lead-in values so
causal audio windows reconstruct exactly.

Frames are quantized to 8-bit at generation time, so the in-memory dataset
and the persisted one are the same object and re-runs are byte-identical.

Blob format TWF1: magic "TWF1", then little-endian u32 height, width,
frame count, then count*H*W bytes of row-major 8-bit grayscale. Each
sample file holds reference, motion, target frames in that order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioTrack, audio_feature_windows, synth_audio
from .clips import LABELS, make_clip
from .render import H, W, AvatarIdentity

MAGIC = b"TWF1"

AUDIO_BY_LABEL = {"speaking": "speechlike", "listening": "speechlike", "idle": "silence"}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    identities: int = 6
    clips_per_identity: int = 20
    clip_frames: int = 48
    samples_per_clip: int = 4
    motion_frames: int = 4
    target_frames: int = 8
    target_range: tuple[int, int] | None = None  # inclusive, overrides fixed f
    label_mix: tuple[float, float, float] = (0.6, 0.2, 0.2)
    window: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.motion_frames < 1 or self.target_frames < 1:
            raise DatasetError("frame counts must be positive")
        if abs(sum(self.label_mix) - 1.0) > 1e-9:
            raise DatasetError(f"label mix {self.label_mix} does not sum to 1")
        lo, hi = self.target_range if self.target_range else (self.target_frames,) * 2
        if lo > hi or lo < 1:
            raise DatasetError(f"bad target range {self.target_range}")
        if self.motion_frames + hi > self.clip_frames:
            raise DatasetError("clip too short for motion + target window")


@dataclass(frozen=True)
class Sample:
    identity_seed: int
    label: str
    expression: float
    start: int
    reference: np.ndarray  # u8 [H, W]
    motion: np.ndarray     # u8 [n, H, W]
    target: np.ndarray     # u8 [f, H, W]
    envelope: np.ndarray   # float32 [k-1 + n + f], includes causal lead-in
    window: int

    @property
    def n(self) -> int:
        return int(self.motion.shape[0])

    @property
    def f(self) -> int:
        return int(self.target.shape[0])

    def frames_f32(self) -> np.ndarray:
        """Motion + target frames as float32 [n+f, H, W] in [0, 1]."""
        return np.concatenate([self.motion, self.target]).astype(np.float32) / 255.0

    def reference_f32(self) -> np.ndarray:
        return self.reference.astype(np.float32) / 255.0

    def audio_windows(self) -> np.ndarray:
        """Causal [n+f, k] windows; row j covers envelope[j .. j+k-1]."""
        k = self.window
        return np.stack(
            [self.envelope[j : j + k] for j in range(self.n + self.f)]
        ).astype(np.float32)


@dataclass
class Dataset:
    config: DatasetConfig
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def quantize_frames(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)


def draw_labels(mix: tuple[float, float, float], count: int, seed: int) -> list[str]:
    rng = np.random.default_rng(np.random.SeedSequence([0x1ABE1, seed]))
    return [LABELS[i] for i in rng.choice(len(LABELS), size=count, p=list(mix))]


def make_dataset(config: DatasetConfig) -> Dataset:
    """Pure function of (config, seed): identical configs give identical bytes."""
    n, k = config.motion_frames, config.window
    lo, hi = config.target_range if config.target_range else (config.target_frames,) * 2

    samples: list[Sample] = []
    for ident_idx in range(config.identities):
        ident_seed = config.seed * 1009 + ident_idx
        identity = AvatarIdentity(ident_seed)
        labels = draw_labels(
            config.label_mix, config.clips_per_identity, config.seed * 733 + ident_idx
        )
        for clip_idx in range(config.clips_per_identity):
            rng = np.random.default_rng(
                np.random.SeedSequence([0xDA7A, config.seed, ident_idx, clip_idx])
            )
            label = labels[clip_idx]
            expression = float(rng.uniform(-1.0, 1.0))
            audio = synth_audio(
                AUDIO_BY_LABEL[label],
                config.clip_frames,
                seed=int(rng.integers(0, 2**31)),
            )
            clip = make_clip(identity, audio, label, expression, seed=int(rng.integers(0, 2**31)))
            frames_u8 = quantize_frames(clip.frames)
            padded = np.concatenate(
                [np.zeros(k - 1, dtype=np.float32), audio.envelope]
            )
            for _ in range(config.samples_per_clip):
                f = int(rng.integers(lo, hi + 1))
                start = int(rng.integers(0, config.clip_frames - (n + f) + 1))
                ref_idx = int(rng.integers(0, config.clip_frames))
                samples.append(
                    Sample(
                        identity_seed=ident_seed,
                        label=label,
                        expression=expression,
                        start=start,
                        reference=frames_u8[ref_idx],
                        motion=frames_u8[start : start + n],
                        target=frames_u8[start + n : start + n + f],
                        envelope=padded[start : start + (k - 1) + n + f].copy(),
                        window=k,
                    )
                )
    return Dataset(config=config, samples=samples)


def write_blob(path: Path, frames: np.ndarray) -> None:
    if frames.dtype != np.uint8 or frames.ndim != 3:
        raise DatasetError(f"blob wants u8 [count, H, W], got {frames.dtype} {frames.shape}")
    count, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", h, w, count))
        fh.write(frames.tobytes())


def read_blob(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic {raw[:4]!r}")
    h, w, count = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != count * h * w:
        raise DatasetError(f"{path}: expected {count * h * w} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, h, w).copy()


def save_dataset(ds: Dataset, root: Path) -> None:
    root = Path(root)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(ds.samples):
        rel = f"blobs/sample_{i:05d}.twf"
        write_blob(root / rel, np.concatenate([s.reference[None], s.motion, s.target]))
        entries.append(
            {
                "file": rel,
                "identity_seed": s.identity_seed,
                "label": s.label,
                "expression": s.expression,
                "start": s.start,
                "n": s.n,
                "f": s.f,
                "envelope": [float(v) for v in s.envelope],
            }
        )
    manifest = {
        "format": "TWF1",
        "height": H,
        "width": W,
        "window": ds.config.window,
        "config": _config_json(ds.config),
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _config_json(config: DatasetConfig) -> dict:
    d = asdict(config)
    d["label_mix"] = list(config.label_mix)
    d["target_range"] = list(config.target_range) if config.target_range else None
    return d


def load_dataset(root: Path) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "TWF1":
        raise DatasetError(f"unsupported dataset format {manifest.get('format')!r}")
    cfg_d = dict(manifest["config"])
    cfg_d["label_mix"] = tuple(cfg_d["label_mix"])
    if cfg_d.get("target_range"):
        cfg_d["target_range"] = tuple(cfg_d["target_range"])
    config = DatasetConfig(**cfg_d)
    k = manifest["window"]
    samples = []
    for e in manifest["samples"]:
        frames = read_blob(root / e["file"])
        if frames.shape[0] != 1 + e["n"] + e["f"]:
            raise DatasetError(f"{e['file']}: frame count does not match manifest")
        samples.append(
            Sample(
                identity_seed=e["identity_seed"],
                label=e["label"],
                expression=e["expression"],
                start=e["start"],
                reference=frames[0],
                motion=frames[1 : 1 + e["n"]],
                target=frames[1 + e["n"] :],
                envelope=np.asarray(e["envelope"], dtype=np.float32),
                window=k,
            )
        )
    return Dataset(config=config, samples=samples)
