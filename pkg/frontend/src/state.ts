/**
 * Console session state with the invariants the UI is built on:
 *
 * - the label shown is always the last acked one, never the requested
 *   one; a request only marks itself pending until its ack arrives
 * - at most one state command is in flight, so the buttons stay
 *   disabled from click to ack
 * - displayed frame indices strictly increase; stale arrivals are
 *   dropped, never reordered
 * - expression sends are debounced to the chunk rate, trailing edge,
 *   so dragging the slider costs one message per chunk
 *
 * The store is transport-agnostic: it talks to a command sink and is
 * fed server messages, which keeps every invariant testable without a
 * socket.
 */

import { decodeFrame, DecodedFrame, FrameQueue } from "./frames";
import {
  ErrorMessage,
  FrameMessage,
  Label,
  StateAckMessage,
  TelemetryMessage,
} from "./protocol";
import { TelemetrySeries, TelemetrySummary } from "./telemetry";
import { realTimer, TimerApi } from "./timer";

export type Connection = "idle" | "connecting" | "open" | "closed";

export interface CommandSink {
  sendState(label: Label): void;
  sendExpression(s: number): void;
}

export interface SessionBanner {
  message: string;
  summary: TelemetrySummary;
}

type Listener = () => void;

export class ConsoleStore {
  connection: Connection = "idle";
  sessionId: string | null = null;
  label: Label = "idle";
  pendingLabel: Label | null = null;
  expression = 0;
  lastSentExpression: number | null = null;
  chunkPeriodMs: number;
  frames: FrameQueue;
  frameCount = 0;
  lastFrameIndex = -1;
  droppedStale = 0;
  gaps = 0;
  firstFrameMs: number | null = null;
  telemetry = new TelemetrySeries();
  lastError: ErrorMessage | null = null;
  banner: SessionBanner | null = null;

  private sink: CommandSink | null = null;
  private timer: TimerApi;
  private debounceHandle: unknown = null;
  private lastExpressionSentAt = -Infinity;
  private listeners: Listener[] = [];

  constructor(options: { chunkPeriodMs?: number; timer?: TimerApi; queueCapacity?: number } = {}) {
    this.chunkPeriodMs = options.chunkPeriodMs ?? 480;
    this.timer = options.timer ?? realTimer;
    this.frames = new FrameQueue(options.queueCapacity ?? 8);
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(): void {
    for (const l of this.listeners) l();
  }

  // ---------------------------------------------------------- connection

  attach(sink: CommandSink): void {
    this.sink = sink;
  }

  connecting(): void {
    this.connection = "connecting";
    this.banner = null;
    this.emit();
  }

  opened(initialLabel: Label = "idle", initialExpression = 0): void {
    this.connection = "open";
    this.label = initialLabel;
    this.expression = initialExpression;
    this.lastSentExpression = initialExpression;
    this.emit();
  }

  closed(message = "session ended"): void {
    const wasOpen = this.connection === "open";
    this.connection = "closed";
    this.pendingLabel = null;
    if (this.debounceHandle !== null) {
      this.timer.clear(this.debounceHandle);
      this.debounceHandle = null;
    }
    if (wasOpen) {
      this.banner = { message, summary: this.telemetry.summary() };
    }
    this.emit();
  }

  // ------------------------------------------------------------ commands

  /** True when a state button should accept a click right now. */
  canRequestState(): boolean {
    return this.connection === "open" && this.pendingLabel === null;
  }

  /** Sends a state change unless one is already in flight. */
  requestState(label: Label): boolean {
    if (!this.canRequestState() || this.sink === null) return false;
    this.pendingLabel = label;
    this.sink.sendState(label);
    this.emit();
    return true;
  }

  /**
   * Slider input. The UI value updates immediately; the wire send is
   * deferred so at most one expression message leaves per chunk period.
   */
  setExpression(value: number): void {
    this.expression = Math.max(-1, Math.min(1, value));
    if (this.connection === "open" && this.debounceHandle === null) {
      const wait = Math.max(
        0,
        this.lastExpressionSentAt + this.chunkPeriodMs - this.timer.now(),
      );
      this.debounceHandle = this.timer.set(() => this.flushExpression(), wait);
    }
    this.emit();
  }

  private flushExpression(): void {
    this.debounceHandle = null;
    if (this.connection !== "open" || this.sink === null) return;
    if (this.expression === this.lastSentExpression) return;
    this.lastSentExpression = this.expression;
    this.lastExpressionSentAt = this.timer.now();
    this.sink.sendExpression(this.expression);
  }

  // ------------------------------------------------------ server events

  onStateAck(msg: StateAckMessage): void {
    // expression and stop acks echo the current label; only an ack that
    // matches the requested label retires the in-flight command
    this.label = msg.label;
    if (this.pendingLabel !== null && msg.label === this.pendingLabel) {
      this.pendingLabel = null;
    }
    this.emit();
  }

  onFrame(msg: FrameMessage): void {
    if (this.sessionId === null) this.sessionId = msg.session;
    if (msg.index <= this.lastFrameIndex) {
      this.droppedStale++;
      return;
    }
    if (this.lastFrameIndex >= 0 && msg.index !== this.lastFrameIndex + 1) {
      this.gaps++;
    }
    this.lastFrameIndex = msg.index;
    this.frameCount++;
    this.frames.push(decodeFrame(msg));
    this.emit();
  }

  onTelemetry(msg: TelemetryMessage, raw: string): void {
    if (this.sessionId === null) this.sessionId = msg.session;
    this.telemetry.append(msg, raw);
    if (this.firstFrameMs === null && msg.first_frame_ms !== null) {
      this.firstFrameMs = msg.first_frame_ms;
    }
    this.emit();
  }

  onServerError(msg: ErrorMessage): void {
    this.lastError = msg;
    // a refused command is no longer in flight; unstick the buttons
    this.pendingLabel = null;
    this.emit();
  }

  // ------------------------------------------------------------- display

  nextFrame(): DecodedFrame | null {
    return this.frames.next();
  }

  exportTelemetryJsonl(): string {
    return this.telemetry.exportJsonl();
  }
}
