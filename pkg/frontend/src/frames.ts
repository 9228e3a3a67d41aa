/**
 * Frame decode and the small display queue that decouples rendering
 * from message receipt. The store filters out-of-order arrivals before
 * they reach the queue, so anything popped here displays in strictly
 * increasing index order; under backpressure the queue sheds oldest
 * frames first and the display skips ahead.
 */

import { FrameMessage, decodePixels } from "./protocol";

export interface DecodedFrame {
  index: number;
  width: number;
  height: number;
  pixels: Uint8ClampedArray;
  tsEmitMs: number;
}

export function decodeFrame(msg: FrameMessage): DecodedFrame {
  return {
    index: msg.index,
    width: msg.width,
    height: msg.height,
    pixels: decodePixels(msg.pixels),
    tsEmitMs: msg.ts_emit_ms,
  };
}

export class FrameQueue {
  private buf: DecodedFrame[] = [];
  shed = 0;

  constructor(readonly capacity: number = 8) {}

  push(frame: DecodedFrame): void {
    this.buf.push(frame);
    while (this.buf.length > this.capacity) {
      this.buf.shift();
      this.shed++;
    }
  }

  next(): DecodedFrame | null {
    return this.buf.shift() ?? null;
  }

  get depth(): number {
    return this.buf.length;
  }
}
