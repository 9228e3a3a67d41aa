"""Streaming engine: chunk planning, latency model, sessions, pipeline."""

from .plan import ChunkPlan, LatencyEstimate, PlanError, plan_chunks, predict_latency
from .pipeline import (
    LiveSource,
    PipelineSummary,
    ScriptedSource,
    SessionEvent,
    TelemetryRecord,
    overlap_benchmark,
    run_pipeline,
    write_telemetry,
)
from .session import (
    ANCHOR_COUNT,
    ANCHOR_FRAMES,
    AudioWindower,
    AvatarSession,
    DenoiseTask,
    SessionError,
    StateAck,
    build_anchor_library,
    run_denoise,
)

__all__ = [
    "ANCHOR_COUNT",
    "ANCHOR_FRAMES",
    "AudioWindower",
    "AvatarSession",
    "ChunkPlan",
    "DenoiseTask",
    "LatencyEstimate",
    "LiveSource",
    "PipelineSummary",
    "PlanError",
    "ScriptedSource",
    "SessionError",
    "SessionEvent",
    "StateAck",
    "TelemetryRecord",
    "build_anchor_library",
    "overlap_benchmark",
    "plan_chunks",
    "predict_latency",
    "run_denoise",
    "run_pipeline",
    "write_telemetry",
]
