"""Five-stage streaming pipeline around an avatar session.

Stages: audio_feat -> prep -> denoise -> decode -> emit. Adjacent stages
hand off through capacity-1 queues, so at most one chunk sits between any
two stages and denoising of chunk k+1 overlaps decoding and emission of
chunk k. The denoise stage additionally never runs more than two chunks
ahead of emission.

Both execution modes produce bit-identical frames: input events are
assigned to chunk boundaries by ideal stream time (frames emitted so far
over the target rate), never by wall clock, and chunk preparation and
denoising consume their own noise streams in chunk order regardless of
how the stages interleave.
"""

from __future__ import annotations

import json
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from queue import Empty, Full, Queue

import numpy as np
import torch

from ..training.rollout import latents_to_frames
from ..world.clips import LABEL_IDS
from .session import AvatarSession, DenoiseTask, SessionError, run_denoise

STAGES = ("audio_feat", "prep", "denoise", "decode", "emit")
# emission lagging ideal time by more than this many steady chunk periods
# is a real-time violation: pacing is dropped until caught up, frames never
VIOLATION_PERIODS = 2.0


@dataclass(frozen=True)
class SessionEvent:
    """External input pinned to a stream time in ms."""

    t_ms: float
    kind: str  # state | expression | audio | stop
    payload: dict = field(default_factory=dict)


class ScriptedSource:
    """Deterministic event/audio feed for offline runs and tests.

    Events apply to the first chunk whose ideal start time is at or after
    their timestamp. Audio events append envelope samples to an internal
    buffer; chunks pull from it and pad any shortfall with silence.
    """

    def __init__(self, events: list[SessionEvent] = (), duration_ms: float | None = None):
        self._events = sorted(events, key=lambda e: e.t_ms)
        self._cursor = 0
        self._audio = np.zeros(0, dtype=np.float32)
        self._stopped = False
        self.duration_ms = duration_ms

    def drain_events(self, t_ms: float) -> list[SessionEvent]:
        out: list[SessionEvent] = []
        while self._cursor < len(self._events) and self._events[self._cursor].t_ms <= t_ms:
            ev = self._events[self._cursor]
            self._cursor += 1
            if ev.kind == "audio":
                env = np.asarray(ev.payload["envelope"], dtype=np.float32)
                self._audio = np.concatenate([self._audio, env])
            elif ev.kind == "stop":
                self._stopped = True
            else:
                out.append(ev)
        return out

    def pull_audio(self, f: int) -> np.ndarray:
        take = min(f, len(self._audio))
        env = np.zeros(f, dtype=np.float32)
        env[:take] = self._audio[:take]
        self._audio = self._audio[take:]
        return env

    def finished(self, t_ms: float) -> bool:
        if self._stopped:
            return True
        return self.duration_ms is not None and t_ms >= self.duration_ms


class LiveSource:
    """Thread-safe feed for interactive use; events apply as they arrive."""

    def __init__(self):
        self._lock = threading.Lock()
        self._events: list[SessionEvent] = []
        self._audio = np.zeros(0, dtype=np.float32)
        self._stopped = False

    def push_audio(self, envelope: np.ndarray) -> None:
        env = np.asarray(envelope, dtype=np.float32)
        with self._lock:
            self._audio = np.concatenate([self._audio, env])

    def push_event(self, kind: str, payload: dict | None = None) -> None:
        with self._lock:
            self._events.append(SessionEvent(t_ms=0.0, kind=kind, payload=payload or {}))

    def stop(self) -> None:
        self.push_event("stop")

    def drain_events(self, t_ms: float) -> list[SessionEvent]:
        with self._lock:
            events, self._events = self._events, []
        out = []
        for ev in events:
            if ev.kind == "stop":
                self._stopped = True
            else:
                out.append(ev)
        return out

    def pull_audio(self, f: int) -> np.ndarray:
        with self._lock:
            take = min(f, len(self._audio))
            env = np.zeros(f, dtype=np.float32)
            env[:take] = self._audio[:take]
            self._audio = self._audio[take:]
        return env

    def finished(self, t_ms: float) -> bool:
        with self._lock:
            return self._stopped


@dataclass
class ChunkJob:
    index: int
    ideal_start_ms: float
    start_frame: int
    f: int
    events: list
    envelope: np.ndarray
    windows: torch.Tensor | None = None
    task: DenoiseTask | None = None
    latents: torch.Tensor | None = None
    frames: np.ndarray | None = None
    label: str = ""
    steps: int = 0
    timings: dict = field(default_factory=dict)
    acks: list = field(default_factory=list)
    violation: bool = False


@dataclass(frozen=True)
class TelemetryRecord:
    chunk: int
    f: int
    steps: int
    label: str
    audio_feat_ms: float
    prep_ms: float
    denoise_ms: float
    decode_ms: float
    emit_ms: float
    pipe_ms: float
    fps: float
    first_frame_ms: float | None
    real_time_violation: bool

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class PipelineSummary:
    chunks: int
    frames: int
    first_frame_ms: float | None
    steady_fps: float | None
    violations: int
    wall_ms: float
    telemetry: list
    acks: list


def write_telemetry(records: list, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def _ms(seconds: float) -> float:
    return seconds * 1000.0


class _Run:
    """Shared state of one pipeline execution."""

    def __init__(
        self, session, source, sink, pace, max_chunks, denoise_fn, decode_fn, delays, start_at
    ):
        self.session = session
        self.source = source
        self.sink = sink
        self.pace = pace
        self.max_chunks = max_chunks
        self.denoise_fn = denoise_fn or run_denoise
        self.decode_fn = decode_fn or latents_to_frames
        self.delays = delays or {}
        self.plan = session.plan
        self.motion = session.motion
        self.stop = threading.Event()
        self.errors: list[BaseException] = []
        self.gate = threading.Condition()
        # resumed sessions start above chunk 0: seed the emit watermark so
        # the look-ahead gate stays relative to this run
        self.emitted_chunk = session.chunk_index - 1
        self.start_at = start_at
        self.t_start = 0.0
        self.prev_emit_end = 0.0
        self.first_frame_ms: float | None = None
        self.telemetry: list[TelemetryRecord] = []
        self.acks: list[dict] = []
        self.frames_out = 0

    def _sleep_stage(self, stage: str) -> None:
        d = self.delays.get(stage, 0.0)
        if d > 0:
            time.sleep(d)

    # -- stages ------------------------------------------------------------

    def jobs(self):
        """audio_feat stage: drains events by ideal boundary time, mirrors
        the label sequence to size each chunk, pulls audio, windows it."""
        plan = self.plan
        label = self.session.label
        index = self.session.chunk_index
        start_frame = 0
        produced = 0
        while self.max_chunks is None or produced < self.max_chunks:
            if self.stop.is_set():
                return
            t_ms = start_frame / plan.fps_target * 1000.0
            # paced runs hold the feed to one steady period of wall-clock
            # lead: enough for the downstream stages to overlap, little
            # enough that stops and live state changes land at the next
            # boundary instead of several pre-generated chunks later
            if self.pace:
                target = self.t_start + t_ms / 1000.0 - plan.f_steady / plan.fps_target
                while not self.stop.is_set() and not self.source.finished(t_ms):
                    now = time.perf_counter()
                    if now >= target:
                        break
                    time.sleep(min(0.02, target - now))
                if self.stop.is_set():
                    return
            events = self.source.drain_events(t_ms)
            if self.source.finished(t_ms):
                return
            upcoming = label
            for ev in events:
                if ev.kind == "state" and ev.payload.get("label") in LABEL_IDS:
                    upcoming = ev.payload["label"]
            f = plan.chunk_frames(index, upcoming != label)
            label = upcoming
            t0 = time.perf_counter()
            envelope = self.source.pull_audio(f)
            windows = self.session.windower.ingest(envelope)
            self._sleep_stage("audio_feat")
            job = ChunkJob(
                index=index,
                ideal_start_ms=t_ms,
                start_frame=start_frame,
                f=f,
                events=events,
                envelope=envelope,
                windows=windows,
            )
            job.timings["audio_feat_ms"] = _ms(time.perf_counter() - t0)
            yield job
            index += 1
            produced += 1
            start_frame += f

    def prep(self, job: ChunkJob) -> None:
        """Applies this boundary's events to the session and packages the
        denoise inputs; the only stage that touches interactive session
        state (labels, expression, chunk noise). The audio-window tail
        belongs to the audio_feat stage."""
        t0 = time.perf_counter()
        session = self.session
        for ev in job.events:
            if ev.kind == "state":
                ack = session.set_state(ev.payload["label"])
                job.acks.append(
                    {"kind": "state", "label": ack.label, "effective_chunk": ack.effective_chunk}
                )
            elif ev.kind == "expression":
                eff = session.set_expression(ev.payload["s"])
                job.acks.append(
                    {"kind": "expression", "value": float(ev.payload["s"]), "effective_chunk": eff}
                )
        job.task = session.prepare_chunk(job.windows, anchored=session.wants_anchor())
        if job.task.f != job.f:
            raise SessionError(f"chunk {job.index}: planned {job.f} frames, session made {job.task.f}")
        job.label = job.task.label
        job.steps = job.task.steps
        self._sleep_stage("prep")
        job.timings["prep_ms"] = _ms(time.perf_counter() - t0)

    def denoise(self, job: ChunkJob) -> None:
        with self.gate:
            while job.index > self.emitted_chunk + 2 and not self.stop.is_set():
                self.gate.wait(timeout=0.05)
        t0 = time.perf_counter()
        job.latents, self.motion = self.denoise_fn(
            self.session.net, self.session.sched, job.task, self.motion
        )
        self._sleep_stage("denoise")
        job.timings["denoise_ms"] = _ms(time.perf_counter() - t0)

    def decode(self, job: ChunkJob) -> None:
        t0 = time.perf_counter()
        job.frames = self.decode_fn(job.latents)
        self._sleep_stage("decode")
        job.timings["decode_ms"] = _ms(time.perf_counter() - t0)

    def emit(self, job: ChunkJob) -> None:
        t0 = time.perf_counter()
        period_s = self.plan.f_steady / self.plan.fps_target
        for ack in job.acks:
            self._send({"type": "ack", "chunk": job.index, **ack})
        for i in range(job.f):
            due = self.t_start + (job.start_frame + i) / self.plan.fps_target
            now = time.perf_counter()
            if self.pace:
                if now - due > VIOLATION_PERIODS * period_s:
                    job.violation = True
                elif due > now:
                    time.sleep(due - now)
            now = time.perf_counter()
            if self.first_frame_ms is None:
                self.first_frame_ms = _ms(now - self.t_start)
            self._send(
                {
                    "type": "frame",
                    "index": job.start_frame + i,
                    "chunk": job.index,
                    "pixels": job.frames[i],
                    "t_ms": _ms(now - self.t_start),
                }
            )
            self.frames_out += 1
        self._sleep_stage("emit")
        end = time.perf_counter()
        job.timings["emit_ms"] = _ms(end - t0)
        span = end - self.prev_emit_end
        self.prev_emit_end = end
        rec = TelemetryRecord(
            chunk=job.index,
            f=job.f,
            steps=job.steps,
            label=job.label,
            audio_feat_ms=job.timings["audio_feat_ms"],
            prep_ms=job.timings["prep_ms"],
            denoise_ms=job.timings["denoise_ms"],
            decode_ms=job.timings["decode_ms"],
            emit_ms=job.timings["emit_ms"],
            pipe_ms=job.timings["audio_feat_ms"]
            + job.timings["prep_ms"]
            + job.timings["denoise_ms"],
            fps=job.f / span if span > 0 else float("inf"),
            first_frame_ms=self.first_frame_ms if job.index == 0 else None,
            real_time_violation=job.violation,
        )
        self.telemetry.append(rec)
        self.session.telemetry.append(rec)
        self.acks.extend(job.acks)
        self._send({"type": "telemetry", **rec.to_json()})
        with self.gate:
            self.emitted_chunk = job.index
            self.gate.notify_all()

    def _send(self, msg: dict) -> None:
        if self.sink is not None:
            self.sink(msg)

    # -- drivers -----------------------------------------------------------

    def run_sync(self) -> None:
        self.t_start = time.perf_counter() if self.start_at is None else self.start_at
        self.prev_emit_end = self.t_start
        for job in self.jobs():
            self.prep(job)
            self.denoise(job)
            self.decode(job)
            self.emit(job)

    def run_threaded(self) -> None:
        queues = [Queue(maxsize=1) for _ in range(4)]

        def put(q: Queue, item) -> bool:
            while not self.stop.is_set():
                try:
                    q.put(item, timeout=0.05)
                    return True
                except Full:
                    continue
            return False

        def get(q: Queue):
            while not self.stop.is_set():
                try:
                    return q.get(timeout=0.05)
                except Empty:
                    continue
            return None

        def guard(fn):
            def body():
                try:
                    fn()
                except BaseException as exc:  # propagate to the caller thread
                    self.errors.append(exc)
                    self.stop.set()
                    with self.gate:
                        self.gate.notify_all()

            return body

        def feed():
            for job in self.jobs():
                if not put(queues[0], job):
                    return
            put(queues[0], None)

        def stage(work, q_in: Queue, q_out: Queue):
            def body():
                while True:
                    job = get(q_in)
                    if job is None:
                        put(q_out, None)
                        return
                    work(job)
                    if not put(q_out, job):
                        return

            return body

        workers = [
            threading.Thread(target=guard(feed), name="audio_feat"),
            threading.Thread(target=guard(stage(self.prep, queues[0], queues[1])), name="prep"),
            threading.Thread(target=guard(stage(self.denoise, queues[1], queues[2])), name="denoise"),
            threading.Thread(target=guard(stage(self.decode, queues[2], queues[3])), name="decode"),
        ]
        self.t_start = time.perf_counter() if self.start_at is None else self.start_at
        self.prev_emit_end = self.t_start
        for w in workers:
            w.start()
        try:
            while True:
                job = get(queues[3])
                if job is None:
                    break
                self.emit(job)
        finally:
            self.stop.set()
            with self.gate:
                self.gate.notify_all()
            for w in workers:
                w.join()
        if self.errors:
            raise self.errors[0]


def run_pipeline(
    session: AvatarSession,
    source,
    sink=None,
    mode: str = "threaded",
    pace: bool = True,
    max_chunks: int | None = None,
    denoise_fn=None,
    decode_fn=None,
    stage_delays: dict | None = None,
    start_at: float | None = None,
) -> PipelineSummary:
    """Drive a session from a source until it stops; returns the run summary.

    sink, when given, receives ack, frame, and telemetry dicts in stream
    order. pace=False emits as fast as the pipeline produces. denoise_fn and
    decode_fn replace the real stage workloads (synthetic benchmarks).
    start_at, a perf_counter reading, backdates the clock so first-frame
    latency covers work done before the pipeline itself spun up.
    """
    if mode not in ("sync", "threaded"):
        raise ValueError(f"unknown mode {mode!r}")
    run = _Run(
        session, source, sink, pace, max_chunks, denoise_fn, decode_fn, stage_delays, start_at
    )
    t0 = time.perf_counter()
    if mode == "sync":
        run.run_sync()
    else:
        run.run_threaded()
    wall_ms = _ms(time.perf_counter() - t0)
    session.motion = run.motion
    steady = [r.fps for r in run.telemetry[1:]]
    return PipelineSummary(
        chunks=len(run.telemetry),
        frames=run.frames_out,
        first_frame_ms=run.first_frame_ms,
        steady_fps=statistics.median(steady) if steady else None,
        violations=sum(r.real_time_violation for r in run.telemetry),
        wall_ms=wall_ms,
        telemetry=run.telemetry,
        acks=run.acks,
    )


def overlap_benchmark(
    make_session,
    chunks: int = 30,
    denoise_s: float = 0.010,
    decode_s: float = 0.008,
) -> dict:
    """Threaded-over-sync speedup with synthetic stage costs.

    make_session() must return a fresh session so both modes run the same
    chunk sequence. Real tensor work on one core serializes under the
    interpreter lock, so the benchmark substitutes sleep-based workloads;
    the measured ratio isolates what the pipeline structure itself buys.
    """

    def fake_denoise(net, sched, task, motion):
        time.sleep(denoise_s)
        return torch.zeros(task.f, *task.noise.shape[1:]), motion

    def fake_decode(latents):
        time.sleep(decode_s)
        return np.zeros((latents.shape[0], 32, 32), dtype=np.uint8)

    results = {}
    for mode in ("sync", "threaded"):
        summary = run_pipeline(
            make_session(),
            ScriptedSource([]),
            mode=mode,
            pace=False,
            max_chunks=chunks,
            denoise_fn=fake_denoise,
            decode_fn=fake_decode,
        )
        results[f"{mode}_ms"] = summary.wall_ms
    results["speedup"] = results["sync_ms"] / results["threaded_ms"]
    return results
