"""Chunk planning and the analytic latency model.

A plan fixes the motion-frame count n, a short first-chunk length for
fast response, a longer steady-state length for coherence, and the
sampling step count. Generated lengths must lie inside the trained
range {n..f_max}. The latency model splits per-chunk cost into the
pipe (everything upstream of the image decode) and the decode itself:
the first frame pays pipe + decode, while at steady state the decode
is hidden by pipeline overlap and throughput is f_steady over the pipe
time alone.
"""

from __future__ import annotations

from dataclasses import dataclass

VALID_STEPS = (2, 4)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ChunkPlan:
    n: int = 4
    f_first: int = 4
    f_steady: int = 12
    steps: int = 4
    fps_target: float = 25.0
    f_max: int = 12
    # render label transitions with a short chunk for faster visible response
    fast_transition: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise PlanError(f"need at least one motion frame, got n={self.n}")
        if self.f_max < self.n:
            raise PlanError(f"trained range empty: f_max={self.f_max} < n={self.n}")
        for name, f in (("f_first", self.f_first), ("f_steady", self.f_steady)):
            if not self.n <= f <= self.f_max:
                raise PlanError(
                    f"{name}={f} outside trained range [{self.n}, {self.f_max}]"
                )
        if self.steps not in VALID_STEPS:
            raise PlanError(f"steps must be one of {VALID_STEPS}, got {self.steps}")
        if self.fps_target <= 0:
            raise PlanError(f"fps_target must be positive, got {self.fps_target}")

    def chunk_frames(self, index: int, transitioned: bool = False) -> int:
        if index == 0:
            return self.f_first
        if transitioned and self.fast_transition:
            return self.f_first
        return self.f_steady


def plan_chunks(**overrides) -> ChunkPlan:
    """Validated plan from keyword overrides of the defaults."""
    return ChunkPlan(**overrides)


@dataclass(frozen=True)
class LatencyEstimate:
    first_frame_ms: float
    steady_fps: float


def predict_latency(pipe_ms, decode_ms, plan: ChunkPlan) -> LatencyEstimate:
    """pipe_ms(f, steps) and decode_ms(f) give per-chunk costs in ms."""
    first_pipe = float(pipe_ms(plan.f_first, plan.steps))
    first_decode = float(decode_ms(plan.f_first))
    steady_pipe = float(pipe_ms(plan.f_steady, plan.steps))
    if min(first_pipe, first_decode, steady_pipe) < 0:
        raise PlanError("stage costs must be non-negative")
    if steady_pipe == 0:
        raise PlanError("steady-state pipe cost must be positive")
    return LatencyEstimate(
        first_frame_ms=first_pipe + first_decode,
        steady_fps=plan.f_steady / (steady_pipe / 1000.0),
    )
