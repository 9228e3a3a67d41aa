"""Streaming avatar session: chunked autoregressive generation with
interactive state.

A session owns everything that persists across chunks: the motion
buffer, the audio-window tail, the reference embedding, the behavior
label, and the idle anchor library. State and expression changes are
staged and take effect at the next chunk boundary, so a chunk is never
rendered under a mix of labels.

Idle anchoring pins the last ANCHOR_FRAMES latents of an idle chunk to
the nearest member of a fixed anchor library: at every sampler step
those positions are overwritten with the anchor re-noised to the
current timestep, and in the final estimate with the anchor itself, so
the motion buffer the next chunk sees is exactly the anchor and
unattended sessions reach a fixed point instead of drifting.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from ..model.codec import encode_latent, normalize_latent
from ..model.net import CondBundle, DenoisingNet
from ..model.sampling import cm_sample, ddim_sample
from ..sched import NoiseSchedule, forward_diffuse
from ..training.rollout import latents_to_frames, reference_latent
from ..world.audio import WINDOW, audio_feature_windows
from ..world.clips import LABEL_IDS
from ..world.render import AvatarIdentity, FaceParams, render_frame
from .plan import ChunkPlan

ANCHOR_FRAMES = 4
ANCHOR_COUNT = 8
# distinct rest poses as (nod, expression offset): both controls quantize in
# 1/4 steps on the pixel grid, so smaller offsets would render identically
_ANCHOR_POSES = (
    (0.0, 0.0),
    (0.25, 0.0),
    (-0.25, 0.0),
    (0.0, 0.25),
    (0.0, -0.25),
    (0.25, 0.25),
    (-0.25, -0.25),
    (0.5, 0.0),
)

SAMPLERS = ("cm", "ddim")


class SessionError(RuntimeError):
    pass


@dataclass(frozen=True)
class StateAck:
    label: str
    effective_chunk: int


class AudioWindower:
    """Causal audio feature windows across chunk boundaries.

    Keeps the trailing window-1 envelope samples so that windows computed
    chunk by chunk match the windows of the concatenated stream exactly.
    """

    def __init__(self, window: int = WINDOW):
        self.window = window
        self.tail = np.zeros(0, dtype=np.float32)

    def ingest(self, envelope: np.ndarray) -> torch.Tensor:
        env = np.asarray(envelope, dtype=np.float32)
        ctx = np.concatenate([self.tail, env])
        windows = audio_feature_windows(ctx, self.window)[len(self.tail) :]
        keep = min(len(ctx), self.window - 1)
        self.tail = ctx[len(ctx) - keep :]
        return torch.from_numpy(np.ascontiguousarray(windows))


def build_anchor_library(
    identity: AvatarIdentity, expression: float = 0.0, count: int = ANCHOR_COUNT
) -> torch.Tensor:
    """Closed-mouth rest-pose latents [count, 4, 16, 16], one per anchor pose."""
    if not 1 <= count <= len(_ANCHOR_POSES):
        raise SessionError(f"anchor count must be in [1, {len(_ANCHOR_POSES)}], got {count}")
    out = []
    for nod, offset in _ANCHOR_POSES[:count]:
        pose = FaceParams(
            mouth=0.0, nod=nod, expression=float(np.clip(expression + offset, -1.0, 1.0))
        )
        lat = normalize_latent(encode_latent(render_frame(identity, pose)[None])[0])
        out.append(torch.from_numpy(lat.astype(np.float32)))
    return torch.stack(out)


@dataclass
class DenoiseTask:
    """Everything one chunk's denoise needs except the motion buffer.

    The motion buffer is late-bound by run_denoise so the denoise stage
    can carry it locally when chunks are prepared ahead of execution.
    """

    index: int
    f: int
    label: str
    label_id: torch.Tensor
    windows: torch.Tensor
    ref_embed: torch.Tensor
    eps_motion: torch.Tensor
    noise: torch.Tensor
    sampler: str
    steps: int
    gen_sample: torch.Generator
    anchor_pool: torch.Tensor | None = None
    anchor_eps: torch.Tensor | None = None
    acks: list = field(default_factory=list)


def _anchor_hook(sched: NoiseSchedule, task: DenoiseTask, motion: torch.Tensor):
    pool = task.anchor_pool
    diff = (pool - motion.mean(dim=0)).reshape(pool.shape[0], -1)
    nearest = pool[int(torch.argmin((diff * diff).sum(dim=1)))]
    pinned = nearest.unsqueeze(0).expand(ANCHOR_FRAMES, -1, -1, -1)

    def hook(x: torch.Tensor, t: int) -> torch.Tensor:
        x = x.clone()
        # the schedule is not identity-preserving at its lowest index, so the
        # final estimate gets the anchor assigned outright
        x[-ANCHOR_FRAMES:] = pinned if t == 0 else forward_diffuse(pinned, task.anchor_eps, sched, t)
        return x

    return hook


@torch.no_grad()
def run_denoise(
    net: DenoisingNet, sched: NoiseSchedule, task: DenoiseTask, motion: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Denoise one chunk; returns (x0 latents [f, ...], next motion buffer)."""

    def cond_at(t: int) -> CondBundle:
        return CondBundle(
            audio=task.windows,
            label=task.label_id,
            reference_embedding=task.ref_embed,
            motion_latents=forward_diffuse(motion, task.eps_motion, sched, t),
        )

    hook = _anchor_hook(sched, task, motion) if task.anchor_pool is not None else None
    if task.sampler == "ddim":
        x0 = ddim_sample(net, sched, task.noise, cond_at, task.steps, hook=hook)
    else:
        x0 = cm_sample(
            net, sched, task.noise, cond_at, task.steps, generator=task.gen_sample, hook=hook
        )
    n = motion.shape[0]
    return x0, x0[-n:].clone()


class AvatarSession:
    """One streaming avatar: a denoiser plus all cross-chunk state.

    Generation noise and consistency re-noising draw from separate
    generators so the noise a chunk consumes depends only on the chunk
    sequence, not on how chunk preparation interleaves with denoising.
    """

    def __init__(
        self,
        net: DenoisingNet,
        sched: NoiseSchedule,
        identity: AvatarIdentity,
        plan: ChunkPlan | None = None,
        label: str = "idle",
        expression: float = 0.0,
        sampler: str = "cm",
        sample_steps: int | None = None,
        anchor_idle: bool = True,
        anchor_count: int = ANCHOR_COUNT,
        seed: int = 0,
    ):
        if label not in LABEL_IDS:
            raise SessionError(f"unknown label {label!r}")
        if sampler not in SAMPLERS:
            raise SessionError(f"unknown sampler {sampler!r}")
        if not -1.0 <= expression <= 1.0:
            raise SessionError(f"expression {expression} outside [-1, 1]")
        self.net = net
        self.sched = sched
        self.identity = identity
        self.plan = plan if plan is not None else ChunkPlan()
        self.label = label
        self.expression = float(expression)
        self.sampler = sampler
        self.sample_steps = self.plan.steps if sample_steps is None else int(sample_steps)
        self.anchor_idle = anchor_idle

        # chunk noise, sampler re-noising, and the per-session anchor noise
        # draw from separate streams so consuming one never shifts another:
        # the chunk stream then matches the offline rollout draw for draw
        self.gen_prep = torch.Generator().manual_seed(seed)
        self.gen_sample = torch.Generator().manual_seed(seed + 1)
        gen_anchor = torch.Generator().manual_seed(seed + 2)

        with torch.no_grad():
            self.ref = reference_latent(identity, self.expression)
            self.ref_embed = net.encode_reference(self.ref[None])[0]
            self.anchors = build_anchor_library(identity, self.expression, anchor_count)
        self.anchor_eps = torch.empty(ANCHOR_FRAMES, *self.ref.shape).normal_(
            generator=gen_anchor
        )

        self.motion = self.ref[None].repeat(self.plan.n, 1, 1, 1)
        self.windower = AudioWindower()
        self.chunk_index = 0
        self.pending_label: str | None = None
        self.telemetry: deque = deque(maxlen=512)

    # -- interactive state ------------------------------------------------

    def peek_next(self) -> tuple[int, str, bool]:
        """(frames, label, transitioned) of the chunk prepare_chunk would
        produce next, without consuming anything."""
        label = self.pending_label if self.pending_label is not None else self.label
        transitioned = self.pending_label is not None
        return self.plan.chunk_frames(self.chunk_index, transitioned), label, transitioned

    def set_state(self, label: str) -> StateAck:
        """Stage a behavior label for the next chunk boundary. Idempotent:
        re-setting the upcoming label changes nothing."""
        if label not in LABEL_IDS:
            raise SessionError(f"unknown label {label!r}")
        upcoming = self.pending_label if self.pending_label is not None else self.label
        if label != upcoming:
            self.pending_label = None if label == self.label else label
        return StateAck(label=label, effective_chunk=self.chunk_index)

    def set_expression(self, s: float) -> int:
        """Re-render the reference at expression s; returns the first chunk
        index the new embedding applies to. Setting the current value leaves
        the embedding untouched."""
        s = float(s)
        if not -1.0 <= s <= 1.0:
            raise SessionError(f"expression {s} outside [-1, 1]")
        if s != self.expression:
            self.expression = s
            with torch.no_grad():
                self.ref = reference_latent(self.identity, s)
                self.ref_embed = self.net.encode_reference(self.ref[None])[0]
        return self.chunk_index

    # -- chunk generation --------------------------------------------------

    def prepare_chunk(self, windows: torch.Tensor, anchored: bool = False) -> DenoiseTask:
        """Consume the next chunk boundary: apply the staged label, draw this
        chunk's noise, and package the denoise inputs."""
        f, label, transitioned = self.peek_next()
        if windows.shape[0] != f:
            raise SessionError(f"chunk {self.chunk_index} needs {f} windows, got {windows.shape[0]}")
        if transitioned:
            self.label = label
            self.pending_label = None
        eps_motion = torch.empty_like(self.motion).normal_(generator=self.gen_prep)
        noise = torch.empty(f, *self.ref.shape).normal_(generator=self.gen_prep)
        task = DenoiseTask(
            index=self.chunk_index,
            f=f,
            label=label,
            label_id=torch.tensor(LABEL_IDS[label], dtype=torch.long),
            windows=windows,
            ref_embed=self.ref_embed,
            eps_motion=eps_motion,
            noise=noise,
            sampler=self.sampler,
            steps=self.sample_steps,
            gen_sample=self.gen_sample,
            anchor_pool=self.anchors if anchored else None,
            anchor_eps=self.anchor_eps if anchored else None,
        )
        self.chunk_index += 1
        return task

    def _chunk(self, envelope: np.ndarray | None, anchored: bool) -> np.ndarray:
        f, _, _ = self.peek_next()
        if envelope is None:
            envelope = np.zeros(f, dtype=np.float32)
        if len(envelope) != f:
            raise SessionError(
                f"chunk {self.chunk_index} needs {f} audio samples, got {len(envelope)}"
            )
        task = self.prepare_chunk(self.windower.ingest(envelope), anchored=anchored)
        x0, self.motion = run_denoise(self.net, self.sched, task, self.motion)
        return latents_to_frames(x0)

    def generate_chunk(self, envelope: np.ndarray) -> np.ndarray:
        """Denoise the next chunk under the current label; returns uint8
        frames [f, 32, 32] and advances the motion buffer."""
        return self._chunk(envelope, anchored=False)

    def idle_anchor_chunk(self, envelope: np.ndarray | None = None) -> np.ndarray:
        """Idle chunk pinned to the nearest anchor pose; silence-driven when
        no envelope is given."""
        _, label, _ = self.peek_next()
        if label != "idle":
            raise SessionError(f"idle anchoring requires the idle label, session is {label!r}")
        if self.anchors.shape[0] == 0:
            raise SessionError("session has no anchor library")
        return self._chunk(envelope, anchored=True)

    def wants_anchor(self) -> bool:
        """Whether the next chunk should take the anchored idle path."""
        _, label, _ = self.peek_next()
        return self.anchor_idle and label == "idle" and self.anchors.shape[0] > 0

    def next_chunk(self, envelope: np.ndarray | None = None) -> np.ndarray:
        """Generate the next chunk, choosing the anchored path automatically."""
        if self.wants_anchor():
            return self.idle_anchor_chunk(envelope)
        return self._chunk(envelope, anchored=False)
