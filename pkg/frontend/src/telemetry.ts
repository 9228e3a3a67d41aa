/**
 * Per-chunk telemetry collected over a session: numeric series for the
 * charts plus the verbatim wire lines for export.
 */

import { Label, TelemetryMessage } from "./protocol";

export interface TelemetryPoint {
  chunk: number;
  f: number;
  steps: number;
  label: Label;
  fps: number;
  pipeMs: number;
  denoiseMs: number;
  decodeMs: number;
  prepMs: number;
  audioFeatMs: number;
  emitMs: number;
  violation: boolean;
}

export interface TelemetrySummary {
  chunks: number;
  frames: number;
  meanFps: number | null;
  firstFrameMs: number | null;
  violations: number;
}

export class TelemetrySeries {
  readonly points: TelemetryPoint[] = [];
  private rawLines: string[] = [];
  firstFrameMs: number | null = null;

  append(msg: TelemetryMessage, raw: string): void {
    this.rawLines.push(raw);
    if (this.firstFrameMs === null && msg.first_frame_ms !== null) {
      this.firstFrameMs = msg.first_frame_ms;
    }
    this.points.push({
      chunk: msg.chunk,
      f: msg.f,
      steps: msg.steps,
      label: msg.label,
      fps: msg.fps,
      pipeMs: msg.pipe_ms,
      denoiseMs: msg.denoise_ms,
      decodeMs: msg.decode_ms,
      prepMs: msg.prep_ms,
      audioFeatMs: msg.audio_feat_ms,
      emitMs: msg.emit_ms,
      violation: msg.real_time_violation,
    });
  }

  /** The session log as the server wrote it: one line per chunk. */
  exportJsonl(): string {
    return this.rawLines.map((line) => line + "\n").join("");
  }

  summary(): TelemetrySummary {
    const n = this.points.length;
    let fpsSum = 0;
    let frames = 0;
    let violations = 0;
    for (const p of this.points) {
      fpsSum += p.fps;
      frames += p.f;
      if (p.violation) violations++;
    }
    return {
      chunks: n,
      frames,
      meanFps: n > 0 ? fpsSum / n : null,
      firstFrameMs: this.firstFrameMs,
      violations,
    };
  }
}
