import { describe, expect, it } from "vitest";

import { EnvelopePump, scriptedEnvelope } from "../src/dial";
import { FakeTimer } from "./helpers/fake-timer";

describe("scriptedEnvelope", () => {
  it("keeps every source inside the valid loudness range", () => {
    for (const source of ["silence", "pulse", "speechlike", "dial"] as const) {
      const env = scriptedEnvelope(source, 48, 0);
      expect(env.length).toBe(48);
      for (const v of env) {
        expect(v).toBeGreaterThanOrEqual(0);
        expect(v).toBeLessThanOrEqual(1);
      }
    }
  });

  it("is silent when asked", () => {
    expect(scriptedEnvelope("silence", 8, 100)).toEqual(new Array(8).fill(0));
  });

  it("continues phase across chunk boundaries", () => {
    const whole = scriptedEnvelope("speechlike", 24, 0);
    const first = scriptedEnvelope("speechlike", 12, 0);
    const second = scriptedEnvelope("speechlike", 12, 12);
    expect([...first, ...second]).toEqual(whole);
  });

  it("actually modulates the speechlike source", () => {
    const env = scriptedEnvelope("speechlike", 48, 0);
    expect(Math.max(...env) - Math.min(...env)).toBeGreaterThan(0.2);
  });
});

describe("EnvelopePump", () => {
  it("ships one envelope per chunk period", () => {
    const timer = new FakeTimer();
    const sent: number[][] = [];
    const pump = new EnvelopePump((env) => sent.push(env), 12, 480, timer);
    pump.level = 0.5;
    pump.start();
    expect(sent.length).toBe(1);
    expect(sent[0]).toEqual(new Array(12).fill(0.5));

    timer.advance(480);
    expect(sent.length).toBe(2);
    timer.advance(960);
    expect(sent.length).toBe(4);
  });

  it("tracks dial level changes between ticks", () => {
    const timer = new FakeTimer();
    const sent: number[][] = [];
    const pump = new EnvelopePump((env) => sent.push(env), 4, 100, timer);
    pump.start();
    pump.level = 0.9;
    timer.advance(100);
    expect(sent[1]).toEqual([0.9, 0.9, 0.9, 0.9]);
  });

  it("stops cleanly and ignores double starts", () => {
    const timer = new FakeTimer();
    const sent: number[][] = [];
    const pump = new EnvelopePump((env) => sent.push(env), 4, 100, timer);
    pump.start();
    pump.start();
    expect(sent.length).toBe(1);
    pump.stop();
    timer.advance(1000);
    expect(sent.length).toBe(1);
    expect(pump.running).toBe(false);
  });
});
