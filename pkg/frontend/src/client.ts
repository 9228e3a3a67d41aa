/**
 * Thin websocket wrapper: serializes client messages, parses server
 * messages, and fans them out to handlers. All session logic (ack
 * tracking, ordering, debounce) lives in the store; this class only
 * moves bytes.
 *
 * Telemetry handlers also receive the raw wire text. The gateway logs
 * the exact string it sent, so keeping our copy verbatim lets an export
 * be compared byte for byte against the server's JSONL.
 */

import {
  ClientMessage,
  ErrorMessage,
  FrameMessage,
  Label,
  StartMessage,
  StateAckMessage,
  TelemetryMessage,
  parseServerMessage,
} from "./protocol";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: string, listener: (event: any) => void): void;
}

export type SocketFactory = (url: string) => SocketLike;

export interface SessionHandlers {
  onOpen?: () => void;
  onFrame?: (msg: FrameMessage) => void;
  onTelemetry?: (msg: TelemetryMessage, raw: string) => void;
  onStateAck?: (msg: StateAckMessage) => void;
  onServerError?: (msg: ErrorMessage) => void;
  onClose?: () => void;
}

const defaultFactory: SocketFactory = (url) => new WebSocket(url);

export class SessionClient {
  private socket: SocketLike;
  private handlers: SessionHandlers;

  constructor(url: string, handlers: SessionHandlers, factory?: SocketFactory) {
    this.handlers = handlers;
    this.socket = (factory ?? defaultFactory)(url);
    this.socket.addEventListener("open", () => this.handlers.onOpen?.());
    this.socket.addEventListener("close", () => this.handlers.onClose?.());
    this.socket.addEventListener("message", (event) =>
      this.dispatch(String(event.data)),
    );
  }

  private dispatch(raw: string): void {
    const msg = parseServerMessage(raw);
    if (msg === null) return;
    switch (msg.type) {
      case "frame":
        this.handlers.onFrame?.(msg);
        break;
      case "telemetry":
        this.handlers.onTelemetry?.(msg, raw);
        break;
      case "state_ack":
        this.handlers.onStateAck?.(msg);
        break;
      case "error":
        this.handlers.onServerError?.(msg);
        break;
    }
  }

  private send(msg: ClientMessage): void {
    this.socket.send(JSON.stringify(msg));
  }

  start(options: Omit<StartMessage, "type"> = {}): void {
    this.send({ type: "start", ...options });
  }

  sendState(label: Label): void {
    this.send({ type: "state", label });
  }

  sendExpression(s: number): void {
    this.send({ type: "expression", s });
  }

  sendAudio(envelope: number[]): void {
    this.send({ type: "audio", envelope });
  }

  stop(): void {
    this.send({ type: "stop" });
  }

  close(): void {
    this.socket.close();
  }
}
