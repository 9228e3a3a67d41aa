/**
 * End-to-end console session against a live gateway process:
 * connect, Speak 4 s, Listen 3 s, Idle 3 s, stop. Checks the full
 * contract in one pass: gap-free frame indices, first-frame latency
 * displayed exactly as the gateway reports it, and a telemetry export
 * byte-identical to the server's session log.
 */

import { readFileSync } from "node:fs";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import WebSocket from "ws";

import { SessionClient, SocketLike } from "../src/client";
import { EnvelopePump } from "../src/dial";
import { ConsoleStore } from "../src/state";
import { GatewayHandle, startGateway } from "./helpers/gateway";

const wsFactory = (url: string): SocketLike => new WebSocket(url) as unknown as SocketLike;

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

let gateway: GatewayHandle;

beforeAll(async () => {
  gateway = await startGateway();
}, 180_000);

afterAll(async () => {
  await gateway?.stop();
}, 60_000);

describe("scripted console session", () => {
  it(
    "speak 4s, listen 3s, idle 3s: ordered frames, exact latency, identical export",
    async () => {
      const store = new ConsoleStore({ queueCapacity: 4096 });
      let closed!: () => void;
      const closedPromise = new Promise<void>((resolve) => (closed = resolve));
      let opened!: () => void;
      const openedPromise = new Promise<void>((resolve) => (opened = resolve));

      store.connecting();
      const client = new SessionClient(
        gateway.wsUrl,
        {
          onOpen: () => opened(),
          onFrame: (msg) => store.onFrame(msg),
          onTelemetry: (msg, raw) => store.onTelemetry(msg, raw),
          onStateAck: (msg) => store.onStateAck(msg),
          onServerError: (msg) => store.onServerError(msg),
          onClose: () => {
            store.closed("session ended");
            closed();
          },
        },
        wsFactory,
      );
      store.attach(client);

      await openedPromise;
      client.start({ avatar_seed: 4 });
      store.opened();

      const pump = new EnvelopePump((env) => client.sendAudio(env));
      pump.source = "speechlike";
      pump.start();

      expect(store.requestState("speaking")).toBe(true);
      await sleep(4000);
      expect(store.requestState("listening")).toBe(true);
      await sleep(3000);
      pump.source = "silence";
      expect(store.requestState("idle")).toBe(true);
      await sleep(3000);
      client.stop();
      await closedPromise;
      pump.stop();

      // the stream arrived gap-free and in order, from frame zero
      expect(store.frameCount).toBeGreaterThan(100);
      expect(store.gaps).toBe(0);
      expect(store.droppedStale).toBe(0);
      expect(store.lastFrameIndex).toBe(store.frameCount - 1);

      // every state change was acked and reflected
      expect(store.label).toBe("idle");
      expect(store.pendingLabel).toBeNull();
      const labels = new Set(store.telemetry.points.map((p) => p.label));
      expect(labels.has("speaking")).toBe(true);
      expect(labels.has("listening")).toBe(true);
      expect(labels.has("idle")).toBe(true);

      // the displayed first-frame latency is the gateway's number, exactly
      expect(store.firstFrameMs).not.toBeNull();
      const metrics = await (await fetch(`${gateway.httpUrl}/metrics`)).json();
      expect(metrics.last_session.first_frame_ms).toBe(store.firstFrameMs);

      // the export is the server's session log, byte for byte
      expect(store.sessionId).not.toBeNull();
      const serverLog = readFileSync(
        join(gateway.telemetryDir, `${store.sessionId}.telemetry.jsonl`),
        "utf8",
      );
      expect(serverLog.length).toBeGreaterThan(0);
      expect(store.exportTelemetryJsonl()).toBe(serverLog);

      // disconnect surfaced the session-ended banner with the summary
      expect(store.banner).not.toBeNull();
      expect(store.banner!.summary.chunks).toBe(store.telemetry.points.length);
    },
    120_000,
  );
});
