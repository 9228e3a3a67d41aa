import { describe, expect, it } from "vitest";

import { decodeFrame, DecodedFrame, FrameQueue } from "../src/frames";

function frame(index: number): DecodedFrame {
  return {
    index,
    width: 2,
    height: 2,
    pixels: new Uint8ClampedArray([0, 1, 2, 3]),
    tsEmitMs: index * 40,
  };
}

describe("decodeFrame", () => {
  it("decodes the base64 payload into pixel bytes", () => {
    const decoded = decodeFrame({
      type: "frame",
      session: "s1",
      index: 7,
      width: 2,
      height: 2,
      pixels: Buffer.from([10, 20, 30, 40]).toString("base64"),
      ts_emit_ms: 123.4,
    });
    expect(decoded.index).toBe(7);
    expect(decoded.tsEmitMs).toBe(123.4);
    expect(Array.from(decoded.pixels)).toEqual([10, 20, 30, 40]);
  });
});

describe("FrameQueue", () => {
  it("pops in arrival order", () => {
    const q = new FrameQueue(4);
    q.push(frame(0));
    q.push(frame(1));
    expect(q.next()?.index).toBe(0);
    expect(q.next()?.index).toBe(1);
    expect(q.next()).toBeNull();
  });

  it("sheds the oldest frames under backpressure", () => {
    const q = new FrameQueue(2);
    q.push(frame(0));
    q.push(frame(1));
    q.push(frame(2));
    expect(q.depth).toBe(2);
    expect(q.shed).toBe(1);
    // display skips ahead but still moves forward in index order
    expect(q.next()?.index).toBe(1);
    expect(q.next()?.index).toBe(2);
  });
});
