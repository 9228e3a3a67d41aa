/**
 * Wire types for the gateway websocket protocol.
 *
 * Every message is a JSON text frame. The client sends start / state /
 * expression / audio / stop; the server answers with frame / telemetry /
 * state_ack / error. Pixel payloads are base64-encoded row-major grayscale.
 */

export type Label = "speaking" | "listening" | "idle";

export const LABELS: readonly Label[] = ["speaking", "listening", "idle"];

export function isLabel(value: unknown): value is Label {
  return value === "speaking" || value === "listening" || value === "idle";
}

export interface PlanOverrides {
  n?: number;
  f_first?: number;
  f_steady?: number;
  steps?: number;
  fps_target?: number;
  f_max?: number;
  fast_transition?: boolean;
}

export interface StartMessage {
  type: "start";
  avatar_seed?: number;
  plan?: PlanOverrides;
  steps?: number;
  expression?: number;
  sampler?: string;
  quantized?: boolean;
  auto_label?: boolean;
}

export interface StateMessage {
  type: "state";
  label: Label;
}

export interface ExpressionMessage {
  type: "expression";
  s: number;
}

export interface AudioMessage {
  type: "audio";
  envelope: number[];
}

export interface StopMessage {
  type: "stop";
}

export type ClientMessage =
  | StartMessage
  | StateMessage
  | ExpressionMessage
  | AudioMessage
  | StopMessage;

export interface FrameMessage {
  type: "frame";
  session: string;
  index: number;
  width: number;
  height: number;
  pixels: string;
  ts_emit_ms: number;
}

export interface TelemetryMessage {
  type: "telemetry";
  session: string;
  chunk: number;
  f: number;
  steps: number;
  label: Label;
  audio_feat_ms: number;
  prep_ms: number;
  denoise_ms: number;
  decode_ms: number;
  emit_ms: number;
  pipe_ms: number;
  fps: number;
  first_frame_ms: number | null;
  real_time_violation: boolean;
}

export interface StateAckMessage {
  type: "state_ack";
  label: Label;
  effective_chunk: number;
}

export interface ErrorMessage {
  type: "error";
  code: string;
  detail: string;
}

export type ServerMessage =
  | FrameMessage
  | TelemetryMessage
  | StateAckMessage
  | ErrorMessage;

const SERVER_TYPES = new Set(["frame", "telemetry", "state_ack", "error"]);

/** Parsed server message, or null when the text is not one we know. */
export function parseServerMessage(raw: string): ServerMessage | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null) return null;
  const msg = data as { type?: unknown };
  if (typeof msg.type !== "string" || !SERVER_TYPES.has(msg.type)) return null;
  return data as ServerMessage;
}

/** Base64 grayscale payload as bytes, one per pixel, row major. */
export function decodePixels(b64: string): Uint8ClampedArray {
  const binary =
    typeof atob === "function"
      ? atob(b64)
      : Buffer.from(b64, "base64").toString("binary");
  const out = new Uint8ClampedArray(binary.length);
  for (let i = 0; i < binary.length; i++) {
    out[i] = binary.charCodeAt(i);
  }
  return out;
}

/** Grayscale bytes expanded to RGBA for an ImageData buffer. */
export function rgbaFromGray(gray: Uint8ClampedArray): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(gray.length * 4);
  for (let i = 0; i < gray.length; i++) {
    const v = gray[i];
    out[i * 4] = v;
    out[i * 4 + 1] = v;
    out[i * 4 + 2] = v;
    out[i * 4 + 3] = 255;
  }
  return out;
}
